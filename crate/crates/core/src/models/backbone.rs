//! MobileNet-style feature extractor: a strided 3×3 stem followed by
//! depthwise-separable blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// 2×2 max-pool (stride 2) after the stem.
    pub stem_pool: bool,
    pub blocks: Vec<BlockSpec>,
}

impl Default for BackboneConfig {
    /// The classifier backbone: 64×64×3 → 64×4×4.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            stem_pool: true,
            blocks: vec![
                BlockSpec {
                    out_channels: 32,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 64,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 64,
                    stride: 1,
                },
            ],
        }
    }
}

impl BackboneConfig {
    /// Localization backbone: 64×64×3 → 48×16×16.
    pub fn localization() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            stem_pool: false,
            blocks: vec![
                BlockSpec {
                    out_channels: 32,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 48,
                    stride: 1,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        let strides = std::iter::once(self.stem_stride).chain(self.blocks.iter().map(|b| b.stride));
        for s in strides {
            if s != 1 && s != 2 {
                return Err(Error::invalid(format!(
                    "backbone stride {s} not in {{1, 2}}"
                )));
            }
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(Error::invalid("backbone block channels must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.stem_channels, |b| b.out_channels)
    }

    /// Spatial size of the feature map for a square `input`×`input` image.
    /// Every downsampling stage must divide its input exactly.
    pub fn feature_size(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let mut s = input;
        let stages = std::iter::once(self.stem_stride)
            .chain(self.stem_pool.then_some(2))
            .chain(self.blocks.iter().map(|b| b.stride));
        for stride in stages {
            if s == 0 || s % stride != 0 {
                return Err(Error::invalid(format!(
                    "input size {input} incompatible with backbone strides (stage input {s}, stride {stride})"
                )));
            }
            s /= stride;
        }
        if s == 0 {
            return Err(Error::invalid(format!(
                "input size {input} collapses to zero"
            )));
        }
        Ok(s)
    }

    /// Adds this backbone's parameters under `prefix` (e.g. `backbone.ground-1.`).
    pub fn init_params(&self, store: &mut ParamStore<f32>, prefix: &str, seed: u64) -> Result<()> {
        self.validate()?;
        let mut rng = rng_for(seed, prefix);
        let cin = self.in_channels;
        let c0 = self.stem_channels;
        store.insert(
            format!("{prefix}stem.weight"),
            uniform(&[c0, cin, 3, 3], he_bound(cin * 9), &mut rng),
        )?;
        store.insert(format!("{prefix}stem.bias"), Tensor::zeros(&[c0]))?;
        let mut c = c0;
        for (i, b) in self.blocks.iter().enumerate() {
            store.insert(
                format!("{prefix}block{i}.dw.weight"),
                uniform(&[c, 1, 3, 3], he_bound(9), &mut rng),
            )?;
            store.insert(format!("{prefix}block{i}.dw.bias"), Tensor::zeros(&[c]))?;
            store.insert(
                format!("{prefix}block{i}.pw.weight"),
                uniform(&[b.out_channels, c, 1, 1], he_bound(c), &mut rng),
            )?;
            store.insert(
                format!("{prefix}block{i}.pw.bias"),
                Tensor::zeros(&[b.out_channels]),
            )?;
            c = b.out_channels;
        }
        Ok(())
    }

    /// Records the backbone on `g`; `image` is `C×H×W` or `1×C×H×W`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
        image: Var,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{prefix}stem.weight"))?;
        let b = g.param(store, &format!("{prefix}stem.bias"))?;
        let mut x = g.conv2d(image, w, Some(b), self.stem_stride, 1)?;
        x = g.relu(x);
        if self.stem_pool {
            x = g.maxpool2d(x, 2, 2)?;
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let dw = g.param(store, &format!("{prefix}block{i}.dw.weight"))?;
            let dwb = g.param(store, &format!("{prefix}block{i}.dw.bias"))?;
            let pw = g.param(store, &format!("{prefix}block{i}.pw.weight"))?;
            let pwb = g.param(store, &format!("{prefix}block{i}.pw.bias"))?;
            x = g.depthwise_conv2d(x, dw, Some(dwb), blk.stride, 1)?;
            x = g.relu(x);
            x = g.conv2d(x, pw, Some(pwb), 1, 0)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// A standalone feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub input_size: usize,
    pub params: ParamStore<f32>,
}

/// Builds a backbone for square `input_size` images with seeded initial weights.
pub fn build_backbone(config: BackboneConfig, input_size: usize, seed: u64) -> Result<Backbone> {
    config.feature_size(input_size)?;
    let mut params = ParamStore::new();
    config.init_params(&mut params, "", seed)?;
    Ok(Backbone {
        config,
        input_size,
        params,
    })
}

impl Backbone {
    /// Feature map `C_f×S_f×S_f` for one `C×H×W` image.
    pub fn extract(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let y = self.config.forward(&mut g, &self.params, "", x)?;
        let [_, c, h, w] = g.value(y).nchw()?;
        g.value(y).reshape(&[c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_size(64).unwrap(), 4);
        assert_eq!(cfg.feature_channels(), 64);
        let bb = build_backbone(cfg, 64, 3).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 37) % 101) as f32 / 101.0);
        assert_eq!(bb.extract(&img).unwrap().shape(), &[64, 4, 4]);
        assert_eq!(BackboneConfig::localization().feature_size(64).unwrap(), 16);
    }

    #[test]
    fn seeded_initialisation() {
        let a = build_backbone(BackboneConfig::default(), 64, 11).unwrap();
        let b = build_backbone(BackboneConfig::default(), 64, 11).unwrap();
        let c = build_backbone(BackboneConfig::default(), 64, 12).unwrap();
        assert!(a.params.values_identical(&b.params));
        assert!(!a.params.values_identical(&c.params));
    }

    #[test]
    fn incompatible_strides_rejected() {
        assert!(BackboneConfig::default().feature_size(60).is_err());
        let mut bad = BackboneConfig::default();
        bad.blocks[0].stride = 3;
        assert!(bad.validate().is_err());
        assert!(build_backbone(BackboneConfig::default(), 36, 0).is_err());
    }
}
