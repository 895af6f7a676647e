//! Model-L: per-pixel building segmentation with a pyramid pooling module.

use serde::{Deserialize, Serialize};

use super::backbone::{lecun_bound, uniform, BackboneConfig};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::seed::rng_for;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelLConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    /// Pyramid pooling grid sizes.
    pub bins: Vec<usize>,
}

impl Default for ModelLConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig::localization(),
            bins: vec![1, 2, 4],
        }
    }
}

impl ModelLConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.backbone.feature_size(self.input_size)?;
        let c = self.backbone.feature_channels();
        validate_bins(c, s, &self.bins)
    }
}

fn validate_bins(channels: usize, size: usize, bins: &[usize]) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::invalid("pyramid pooling needs at least one bin"));
    }
    if let Some(&b) = bins.iter().find(|&&b| b == 0 || b > size) {
        return Err(Error::invalid(format!(
            "pyramid bin {b} exceeds feature size {size}"
        )));
    }
    if channels % bins.len() != 0 {
        return Err(Error::invalid(format!(
            "{channels} feature channels not divisible across {} pyramid levels",
            bins.len()
        )));
    }
    Ok(())
}

/// Adds the 1×1 reduction convolutions of a pyramid pooling module.
pub fn init_pyramid_params(
    store: &mut ParamStore<f32>,
    prefix: &str,
    channels: usize,
    bins: &[usize],
    seed: u64,
) -> Result<()> {
    let reduced = channels / bins.len();
    let mut rng = rng_for(seed, prefix);
    for i in 0..bins.len() {
        store.insert(
            format!("{prefix}level{i}.weight"),
            uniform(&[reduced, channels, 1, 1], lecun_bound(channels), &mut rng),
        )?;
        store.insert(format!("{prefix}level{i}.bias"), Tensor::zeros(&[reduced]))?;
    }
    Ok(())
}

/// For every bin `b`: average-pool to `b×b`, reduce with a 1×1 convolution
/// to `C/|bins|` channels and resize back to `S×S`; the levels are then
/// concatenated after the input, giving `2C` channels.
pub fn pyramid_pooling_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    features: Var,
    bins: &[usize],
) -> Result<Var> {
    let [_, c, h, w] = g.value(features).nchw()?;
    validate_bins(c, h.min(w), bins)?;
    let mut levels = vec![features];
    for (i, &b) in bins.iter().enumerate() {
        let pooled = g.adaptive_avg_pool2d(features, b, b)?;
        let wt = g.param(store, &format!("{prefix}level{i}.weight"))?;
        let bias = g.param(store, &format!("{prefix}level{i}.bias"))?;
        let reduced = g.conv2d(pooled, wt, Some(bias), 1, 0)?;
        levels.push(g.bilinear_resize(reduced, h, w)?);
    }
    g.concat_channels(&levels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelL {
    pub config: ModelLConfig,
    pub params: ParamStore<f32>,
}

impl ModelL {
    pub fn new(config: ModelLConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config
            .backbone
            .init_params(&mut params, "backbone.", seed)?;
        let c = config.backbone.feature_channels();
        init_pyramid_params(&mut params, "ppm.", c, &config.bins, seed)?;
        let mut rng = rng_for(seed, "classifier.");
        params.insert(
            "classifier.weight",
            uniform(&[1, 2 * c, 1, 1], lecun_bound(2 * c), &mut rng),
        )?;
        params.insert("classifier.bias", Tensor::zeros(&[1]))?;
        Ok(Self { config, params })
    }

    /// Records the forward pass; `image` is `3×H×W`, the result `1×H×W`
    /// building probabilities.
    pub fn forward<T: Real>(
        config: &ModelLConfig,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let [n, c, h, w] = g.value(image).nchw()?;
        let s = config.input_size;
        if n != 1 || c != config.backbone.in_channels || h != s || w != s {
            return Err(Error::ShapeMismatch {
                op: "model_l_forward",
                lhs: g.value(image).shape().to_vec(),
                rhs: vec![config.backbone.in_channels, s, s],
            });
        }
        let feats = config.backbone.forward(g, store, "backbone.", image)?;
        let ctx = pyramid_pooling_forward(g, store, "ppm.", feats, &config.bins)?;
        let cw = g.param(store, "classifier.weight")?;
        let cb = g.param(store, "classifier.bias")?;
        let logits = g.conv2d(ctx, cw, Some(cb), 1, 0)?;
        let up = g.bilinear_resize(logits, h, w)?;
        let prob = g.sigmoid(up);
        g.reshape(prob, &[1, h, w])
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let y = Self::forward(&self.config, &mut g, &self.params, x)?;
        Ok(g.value(y).clone())
    }
}

/// Thresholds probabilities (`p >= threshold` is building).
pub fn binarize_mask<T: Real>(probabilities: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let [n, c, h, w] = probabilities.nchw()?;
    if n * c != 1 {
        return Err(Error::invalid(format!(
            "expected a single-channel probability map, got {:?}",
            probabilities.shape()
        )));
    }
    let t = T::lit(threshold);
    BinaryMask::new(h, w, probabilities.data().iter().map(|&p| p >= t).collect())
}

/// Zeroes every channel outside the mask.
pub fn apply_mask<T: Real>(image: &Tensor<T>, mask: &BinaryMask) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.nchw()?;
    if (h, w) != mask.dims() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: image.shape().to_vec(),
            rhs: vec![mask.height(), mask.width()],
        });
    }
    let mut out = image.clone();
    let plane = h * w;
    for ch in 0..n * c {
        for (v, &keep) in out.data_mut()[ch * plane..][..plane]
            .iter_mut()
            .zip(mask.data())
        {
            if !keep {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}
