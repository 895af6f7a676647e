use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Focal,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Focal => "focal",
            LossKind::CrossEntropy => "cross-entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(LossKind::Focal),
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::invalid(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping: bool,
    pub early_stop_patience: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub focal_gamma: f64,
    /// Per-class focal weights; inverse training-set frequency (mean 1) when absent.
    pub focal_alpha: Option<Vec<f64>>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::localization()
    }
}

impl TrainConfig {
    /// Model-L recipe: focal loss, Adam at 1e-4, batch 1, up to 50 epochs with early stopping.
    pub fn localization() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            max_epochs: 50,
            early_stopping: true,
            early_stop_patience: 3,
            loss: LossKind::Focal,
            seed: 0,
            focal_gamma: 2.0,
            focal_alpha: None,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }

    /// Model-C phase 1: frozen backbones, head trained for 25 epochs at 1e-3.
    pub fn classification_head() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 25,
            early_stopping: false,
            loss: LossKind::CrossEntropy,
            ..Self::localization()
        }
    }

    /// Model-C phase 2: everything trainable at 1e-4.
    pub fn classification_finetune() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::classification_head()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("batch size and patience must be at least 1"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::invalid(format!(
                "focal gamma {} must be nonnegative",
                self.focal_gamma
            )));
        }
        if let Some(a) = &self.focal_alpha {
            if a.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("focal class weights must be positive"));
            }
        }
        Ok(())
    }

    /// `(gamma, alpha)` for this config's loss with `k` classes;
    /// `default_alpha` is used when no weights are configured.
    pub(crate) fn loss_params(
        &self,
        k: usize,
        default_alpha: impl FnOnce() -> Vec<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        match self.loss {
            LossKind::CrossEntropy => Ok((0.0, vec![1.0; k])),
            LossKind::Focal => {
                let alpha = self.focal_alpha.clone().unwrap_or_else(default_alpha);
                if alpha.len() != k {
                    return Err(Error::invalid(format!(
                        "{} focal weights for {k} classes",
                        alpha.len()
                    )));
                }
                Ok((self.focal_gamma, alpha))
            }
        }
    }
}
