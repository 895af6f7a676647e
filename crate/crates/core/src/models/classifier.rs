//! Model-C: per-view backbones, multi-view fusion and a dense head that maps
//! a building's view collection to a distribution over damage states.

use serde::{Deserialize, Serialize};

use super::backbone::{he_bound, lecun_bound, uniform, BackboneConfig};
use super::types::{FusionMode, ViewRole, NUM_DAMAGE_STATES};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{ops, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    /// Views consumed, in fusion order.
    pub views: Vec<ViewRole>,
    pub fusion: FusionMode,
    pub shared_backbone: bool,
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelCConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig::default(),
            views: ViewRole::ALL.to_vec(),
            fusion: FusionMode::EarlyConcat,
            shared_backbone: false,
            head_hidden: vec![128],
            num_classes: NUM_DAMAGE_STATES,
        }
    }
}

impl ModelCConfig {
    /// A classifier that only sees one view (ablation baseline).
    pub fn single_view(role: ViewRole) -> Self {
        Self {
            views: vec![role],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.feature_size(self.input_size)?;
        if self.views.is_empty() {
            return Err(Error::invalid("classifier needs at least one view"));
        }
        for (i, v) in self.views.iter().enumerate() {
            if self.views[..i].contains(v) {
                return Err(Error::invalid(format!("view {v} listed twice")));
            }
        }
        if self.num_classes < 2 || self.head_hidden.contains(&0) {
            return Err(Error::invalid("classifier head sizes must be positive"));
        }
        Ok(())
    }

    pub fn backbone_prefix(&self, role: ViewRole) -> String {
        if self.shared_backbone {
            "backbone.shared.".to_string()
        } else {
            format!("backbone.{role}.")
        }
    }

    /// Length of the flattened fused feature vector.
    pub fn fused_dim(&self) -> Result<usize> {
        let s = self.backbone.feature_size(self.input_size)?;
        let per_view = self.backbone.feature_channels() * s * s;
        Ok(match self.fusion {
            FusionMode::EarlyConcat => self.views.len() * per_view,
            FusionMode::ViewMax => per_view,
        })
    }
}

/// Combines per-view `C×S×S` (or `1×C×S×S`) feature maps. Early-concat
/// stacks them along channels in the given order; view-max takes the
/// elementwise maximum.
pub fn multi_view_fuse<T: Real>(per_view: &[Tensor<T>], mode: FusionMode) -> Result<Tensor<T>> {
    let first = per_view
        .first()
        .ok_or_else(|| Error::invalid("multi_view_fuse needs at least one view"))?;
    for t in per_view {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "multi_view_fuse",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let refs: Vec<&Tensor<T>> = per_view.iter().collect();
    let fused = match mode {
        FusionMode::EarlyConcat => ops::concat_channels(&refs)?,
        FusionMode::ViewMax => ops::elementwise_max(&refs)?.0,
    };
    if first.ndim() == 3 {
        let [_, c, h, w] = fused.nchw()?;
        fused.reshape(&[c, h, w])
    } else {
        Ok(fused)
    }
}

fn fuse_graph<T: Real>(g: &mut Graph<T>, feats: &[Var], mode: FusionMode) -> Result<Var> {
    let first = g.value(feats[0]).shape().to_vec();
    for &f in feats {
        if g.value(f).shape() != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "multi_view_fuse",
                lhs: first,
                rhs: g.value(f).shape().to_vec(),
            });
        }
    }
    match mode {
        FusionMode::EarlyConcat => g.concat_channels(feats),
        FusionMode::ViewMax => g.elementwise_max(feats),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelC {
    pub config: ModelCConfig,
    pub params: ParamStore<f32>,
}

impl ModelC {
    pub fn new(config: ModelCConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        if config.shared_backbone {
            config.backbone.init_params(
                &mut params,
                &config.backbone_prefix(config.views[0]),
                seed,
            )?;
        } else {
            for &role in &config.views {
                config
                    .backbone
                    .init_params(&mut params, &config.backbone_prefix(role), seed)?;
            }
        }
        let mut rng = rng_for(seed, "head.");
        let mut width = config.fused_dim()?;
        let n_hidden = config.head_hidden.len();
        for (i, &out) in config
            .head_hidden
            .iter()
            .chain([config.num_classes].iter())
            .enumerate()
        {
            let bound = if i < n_hidden {
                he_bound(width)
            } else {
                lecun_bound(width)
            };
            params.insert(
                format!("head.fc{i}.weight"),
                uniform(&[width, out], bound, &mut rng),
            )?;
            params.insert(format!("head.fc{i}.bias"), Tensor::zeros(&[out]))?;
            width = out;
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass over one masked image per configured view
    /// (in configuration order); returns `1×k` class probabilities.
    pub fn forward<T: Real>(
        config: &ModelCConfig,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        views: &[Var],
    ) -> Result<Var> {
        if views.len() != config.views.len() {
            return Err(Error::invalid(format!(
                "classifier expects {} views, got {}",
                config.views.len(),
                views.len()
            )));
        }
        let mut feats = Vec::with_capacity(views.len());
        for (&role, &img) in config.views.iter().zip(views) {
            feats.push(
                config
                    .backbone
                    .forward(g, store, &config.backbone_prefix(role), img)?,
            );
        }
        let fused = fuse_graph(g, &feats, config.fusion)?;
        let dim = g.value(fused).len();
        let mut x = g.reshape(fused, &[1, dim])?;
        let layers = config.head_hidden.len() + 1;
        for i in 0..layers {
            let w = g.param(store, &format!("head.fc{i}.weight"))?;
            let b = g.param(store, &format!("head.fc{i}.bias"))?;
            x = g.dense(x, w, Some(b))?;
            if i + 1 < layers {
                x = g.relu(x);
            }
        }
        g.softmax(x)
    }

    /// Class probabilities for one building.
    pub fn predict(&self, views: &[Tensor<f32>]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = views.iter().map(|v| g.input(v.clone())).collect();
        let y = Self::forward(&self.config, &mut g, &self.params, &vars)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Index of the largest probability; ties go to the lower class.
pub fn argmax_lowest<T: PartialOrd + Copy>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
