//! PNG encoding of RGB images (`3×H×W` in `[0,1]`) and binary masks.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level, as a save/load round trip would.
pub fn quantize_image(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| quantize(v) as f32 / 255.0)
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = image.nchw()?;
    if c != 3 {
        return Err(Error::invalid(format!(
            "RGB image needs 3 channels, got {c}"
        )));
    }
    let d = image.data();
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([
            quantize(d[i]),
            quantize(d[plane + i]),
            quantize(d[2 * plane + i]),
        ])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let w = mask.width();
    let img = GrayImage::from_fn(w as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Pixels at or above 128 are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.pixels().map(|p| p[0] >= 128).collect())
}
