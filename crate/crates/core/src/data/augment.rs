//! Training-time augmentation. Geometric ops resample image and mask
//! through the same nearest-neighbour map (zero outside the source);
//! photometric ops touch the image only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentOp {
    HorizontalFlip,
    /// Rotation about the image centre, then scaling and translation
    /// (fractions of the image size).
    Affine {
        rotation_deg: f64,
        translate: [f64; 2],
        scale: f64,
    },
    /// Source positions of the four output corners (TL, TR, BR, BL), as
    /// offsets in fractions of the image size.
    Perspective {
        corners: [[f64; 2]; 4],
    },
    /// Source window `[top, left, height, width]` in fractions of the image, resized back.
    RandomCrop {
        window: [f64; 4],
    },
    BrightnessContrast {
        brightness: f64,
        contrast: f64,
    },
    Blur,
    Sharpen {
        amount: f64,
    },
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
}

impl AugmentOp {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugmentOp::HorizontalFlip
                | AugmentOp::Affine { .. }
                | AugmentOp::Perspective { .. }
                | AugmentOp::RandomCrop { .. }
        )
    }

    /// Homography taking output pixel coordinates to source coordinates.
    fn source_map(&self, h: usize, w: usize) -> Option<[f64; 9]> {
        let (hf, wf) = (h as f64, w as f64);
        match *self {
            AugmentOp::HorizontalFlip => Some([-1.0, 0.0, wf, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            AugmentOp::Affine {
                rotation_deg,
                translate,
                scale,
            } => {
                let (s, c) = rotation_deg.to_radians().sin_cos();
                let (cx, cy) = (wf / 2.0, hf / 2.0);
                let (tx, ty) = (translate[0] * wf, translate[1] * hf);
                // forward: p' = C + scale·R·(p − C) + t
                let a = [scale * c, -scale * s, scale * s, scale * c];
                let fwd = [
                    a[0],
                    a[1],
                    cx + tx - a[0] * cx - a[1] * cy,
                    a[2],
                    a[3],
                    cy + ty - a[2] * cx - a[3] * cy,
                    0.0,
                    0.0,
                    1.0,
                ];
                invert3(&fwd)
            }
            AugmentOp::Perspective { corners } => {
                let dst = [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]];
                let src: Vec<[f64; 2]> = dst
                    .iter()
                    .zip(corners)
                    .map(|(d, o)| [d[0] + o[0] * wf, d[1] + o[1] * hf])
                    .collect();
                homography(&dst, &src)
            }
            AugmentOp::RandomCrop { window } => {
                let [top, left, ch, cw] = window;
                Some([cw, 0.0, left * wf, 0.0, ch, top * hf, 0.0, 0.0, 1.0])
            }
            _ => None,
        }
    }
}

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

fn invert3(m: &[f64; 9]) -> Option<[f64; 9]> {
    let d = det3(m);
    if !d.is_finite() || d.abs() < 1e-9 {
        return None;
    }
    let adj = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Some(adj.map(|v| v / d))
}

/// Homography `H` (with `h33 = 1`) such that `H·from[i] ∝ to[i]`.
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ([x, y], [u, v]) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    (det3(&h).abs() > 1e-9 && h.iter().all(|v| v.is_finite())).then_some(h)
}

/// Parameter ranges and per-op probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub affine_p: f64,
    pub max_rotation_deg: f64,
    pub max_translate: f64,
    pub scale_range: [f64; 2],
    pub perspective_p: f64,
    pub max_perspective: f64,
    pub crop_p: f64,
    pub min_crop_area: f64,
    pub brightness_contrast_p: f64,
    pub max_brightness: f64,
    pub max_contrast: f64,
    pub blur_p: f64,
    pub sharpen_p: f64,
    pub noise_p: f64,
    pub max_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            affine_p: 0.3,
            max_rotation_deg: 15.0,
            max_translate: 0.1,
            scale_range: [0.9, 1.1],
            perspective_p: 0.2,
            max_perspective: 0.1,
            crop_p: 0.2,
            min_crop_area: 0.8,
            brightness_contrast_p: 0.5,
            max_brightness: 0.2,
            max_contrast: 0.2,
            blur_p: 0.1,
            sharpen_p: 0.1,
            noise_p: 0.3,
            max_noise_sigma: 0.05,
        }
    }
}

fn sym(rng: &mut impl Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

impl AugmentConfig {
    /// Draws an op sequence from a per-sample seed. Geometric ops come first.
    pub fn draw(&self, sample_seed: u64) -> Vec<AugmentOp> {
        let mut rng = rng_for(sample_seed, "augment");
        let mut ops = Vec::new();
        if rng.random_bool(self.flip_p) {
            ops.push(AugmentOp::HorizontalFlip);
        }
        if rng.random_bool(self.affine_p) {
            loop {
                let op = AugmentOp::Affine {
                    rotation_deg: sym(&mut rng, self.max_rotation_deg),
                    translate: [
                        sym(&mut rng, self.max_translate),
                        sym(&mut rng, self.max_translate),
                    ],
                    scale: rng.random_range(self.scale_range[0]..=self.scale_range[1]),
                };
                if op.source_map(64, 64).is_some() {
                    ops.push(op);
                    break;
                }
            }
        }
        if rng.random_bool(self.perspective_p) {
            loop {
                let mut corners = [[0.0; 2]; 4];
                for c in &mut corners {
                    *c = [
                        sym(&mut rng, self.max_perspective),
                        sym(&mut rng, self.max_perspective),
                    ];
                }
                let op = AugmentOp::Perspective { corners };
                if op.source_map(64, 64).is_some() {
                    ops.push(op);
                    break;
                }
            }
        }
        if rng.random_bool(self.crop_p) {
            let area = rng.random_range(self.min_crop_area..=1.0);
            let side = area.sqrt();
            let top = rng.random_range(0.0..=1.0 - side);
            let left = rng.random_range(0.0..=1.0 - side);
            ops.push(AugmentOp::RandomCrop {
                window: [top, left, side, side],
            });
        }
        if rng.random_bool(self.brightness_contrast_p) {
            ops.push(AugmentOp::BrightnessContrast {
                brightness: sym(&mut rng, self.max_brightness),
                contrast: sym(&mut rng, self.max_contrast),
            });
        }
        if rng.random_bool(self.blur_p) {
            ops.push(AugmentOp::Blur);
        }
        if rng.random_bool(self.sharpen_p) {
            ops.push(AugmentOp::Sharpen {
                amount: rng.random_range(0.2..=1.0),
            });
        }
        if rng.random_bool(self.noise_p) {
            ops.push(AugmentOp::GaussianNoise {
                sigma: rng.random_range(0.0..=self.max_noise_sigma),
                seed: rng.random(),
            });
        }
        ops
    }
}

fn resample(
    image: &Tensor<f32>,
    mask: &BinaryMask,
    map: &[f64; 9],
) -> Result<(Tensor<f32>, BinaryMask)> {
    let [_, c, h, w] = image.nchw()?;
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    let mut out_mask = BinaryMask::filled(h, w, false);
    for r in 0..h {
        for q in 0..w {
            let (x, y) = (q as f64 + 0.5, r as f64 + 0.5);
            let z = map[6] * x + map[7] * y + map[8];
            let sx = ((map[0] * x + map[1] * y + map[2]) / z).floor();
            let sy = ((map[3] * x + map[4] * y + map[5]) / z).floor();
            if !(sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64) {
                continue;
            }
            let (sr, sc) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[ch * plane + r * w + q] = image.data()[ch * plane + sr * w + sc];
            }
            out_mask.set(r, q, mask.get(sr, sc));
        }
    }
    Ok((Tensor::new(image.shape().to_vec(), out)?, out_mask))
}

fn blur3(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, c, h, w] = image.nchw()?;
    let k = [0.25f32, 0.5, 0.25];
    let d = image.data();
    let mut tmp = vec![0.0f32; d.len()];
    let mut out = vec![0.0f32; d.len()];
    let plane = h * w;
    for ch in 0..c {
        let p = &d[ch * plane..][..plane];
        for r in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let qq = (q + t).saturating_sub(1).min(w - 1);
                    acc += kv * p[r * w + qq];
                }
                tmp[ch * plane + r * w + q] = acc;
            }
        }
        for r in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let rr = (r + t).saturating_sub(1).min(h - 1);
                    acc += kv * tmp[ch * plane + rr * w + q];
                }
                out[ch * plane + r * w + q] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Applies `ops` in order to an image (`C×H×W`) and its mask.
pub fn augment(
    image: &Tensor<f32>,
    mask: &BinaryMask,
    ops: &[AugmentOp],
) -> Result<(Tensor<f32>, BinaryMask)> {
    let [_, _, h, w] = image.nchw()?;
    if (h, w) != mask.dims() {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: image.shape().to_vec(),
            rhs: vec![mask.height(), mask.width()],
        });
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    for op in ops {
        if op.is_geometric() {
            let map = op
                .source_map(h, w)
                .ok_or_else(|| Error::invalid(format!("degenerate geometric op {op:?}")))?;
            (img, m) = resample(&img, &m, &map)?;
            continue;
        }
        img = match *op {
            AugmentOp::BrightnessContrast {
                brightness,
                contrast,
            } => {
                let (b, k) = (brightness as f32, 1.0 + contrast as f32);
                img.map(|v| (v - 0.5) * k + 0.5 + b)
            }
            AugmentOp::Blur => blur3(&img)?,
            AugmentOp::Sharpen { amount } => {
                let soft = blur3(&img)?;
                let a = amount as f32;
                let data = img
                    .data()
                    .iter()
                    .zip(soft.data())
                    .map(|(&x, &s)| x + a * (x - s))
                    .collect();
                Tensor::new(img.shape().to_vec(), data)?
            }
            AugmentOp::GaussianNoise { sigma, seed } => {
                let normal =
                    Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
                let mut rng = rng_for(seed, "noise");
                let data = img
                    .data()
                    .iter()
                    .map(|&v| v + normal.sample(&mut rng) as f32)
                    .collect();
                Tensor::new(img.shape().to_vec(), data)?
            }
            _ => unreachable!("geometric ops handled above"),
        };
        img = img.map(|v| v.clamp(0.0, 1.0));
    }
    Ok((img, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (Tensor<f32>, BinaryMask) {
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 101) as f32 / 100.0);
        let m = BinaryMask::from_fn(16, 16, |r, c| r > 3 && c > 5 && r < 12);
        (img, m)
    }

    #[test]
    fn flip_twice_is_identity() {
        let (img, m) = scene();
        let ops = [AugmentOp::HorizontalFlip, AugmentOp::HorizontalFlip];
        assert_eq!(augment(&img, &m, &ops).unwrap(), (img, m));
    }

    #[test]
    fn flip_moves_lit_pixel() {
        let w = 9;
        for c in 0..w {
            let mut img = Tensor::<f32>::zeros(&[1, 4, w]);
            img.data_mut()[2 * w + c] = 1.0;
            let m = BinaryMask::filled(4, w, true);
            let (out, _) = augment(&img, &m, &[AugmentOp::HorizontalFlip]).unwrap();
            let lit: Vec<usize> = (0..4 * w).filter(|&i| out.data()[i] == 1.0).collect();
            assert_eq!(lit, vec![2 * w + (w - 1 - c)]);
        }
    }

    #[test]
    fn photometric_keeps_mask() {
        let (img, m) = scene();
        let ops = [
            AugmentOp::BrightnessContrast {
                brightness: 0.15,
                contrast: -0.1,
            },
            AugmentOp::Blur,
            AugmentOp::Sharpen { amount: 0.5 },
            AugmentOp::GaussianNoise {
                sigma: 0.05,
                seed: 3,
            },
        ];
        let (out, m2) = augment(&img, &m, &ops).unwrap();
        assert_eq!(m2, m);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(out, img);
    }

    #[test]
    fn draws_are_seeded() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.draw(17), cfg.draw(17));
        let (img, m) = scene();
        for s in 0..50 {
            let ops = cfg.draw(s);
            assert_eq!(
                augment(&img, &m, &ops).unwrap(),
                augment(&img, &m, &ops).unwrap()
            );
        }
    }

    #[test]
    fn identity_crop_and_affine() {
        let (img, m) = scene();
        let ops = [
            AugmentOp::RandomCrop {
                window: [0.0, 0.0, 1.0, 1.0],
            },
            AugmentOp::Affine {
                rotation_deg: 0.0,
                translate: [0.0, 0.0],
                scale: 1.0,
            },
            AugmentOp::Perspective {
                corners: [[0.0; 2]; 4],
            },
        ];
        assert_eq!(augment(&img, &m, &ops).unwrap(), (img, m));
    }

    #[test]
    fn degenerate_affine_rejected() {
        let (img, m) = scene();
        let op = AugmentOp::Affine {
            rotation_deg: 0.0,
            translate: [0.0, 0.0],
            scale: 0.0,
        };
        assert!(augment(&img, &m, &[op]).is_err());
    }
}
