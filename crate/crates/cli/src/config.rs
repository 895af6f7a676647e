//! The TOML run configuration archived beside every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvdamage::data::GeneratorConfig;
use mvdamage::models::{ModelCConfig, ModelLConfig};
use mvdamage::seed::derive_seed;
use mvdamage::training::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Existing dataset directory; when absent, commands use `generator`.
    pub path: Option<PathBuf>,
    pub generator: GeneratorConfig,
    /// Train/val/test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            generator: GeneratorConfig {
                n_buildings: 100,
                ..GeneratorConfig::default()
            },
            split: [0.8, 0.1, 0.1],
        }
    }
}

/// Multi-view versus single-view comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// One dataset and one set of models per seed.
    pub seeds: Vec<u64>,
    /// Generator settings; the seed is replaced by each ablation seed.
    pub generator: GeneratorConfig,
    pub split: [f64; 3],
    pub head: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let head = TrainConfig {
            learning_rate: 3e-4,
            batch_size: 4,
            max_epochs: 3,
            early_stopping: false,
            loss: LossKind::CrossEntropy,
            augment: false,
            ..TrainConfig::classification_head()
        };
        Self {
            seeds: vec![1, 2, 3],
            generator: GeneratorConfig {
                n_buildings: 1000,
                directional_fraction: 1.0,
                ..GeneratorConfig::default()
            },
            split: [0.8, 0.1, 0.1],
            finetune: TrainConfig {
                max_epochs: 12,
                ..head.clone()
            },
            head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives model initialisation and every training stream; the
    /// `seed` fields of the nested training configs are overwritten by it.
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub model_l: ModelLConfig,
    pub model_c: ModelCConfig,
    pub train_l: TrainConfig,
    pub train_c_head: TrainConfig,
    pub train_c_finetune: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: None,
            data: DataConfig::default(),
            model_l: ModelLConfig::default(),
            model_c: ModelCConfig::default(),
            train_l: TrainConfig::localization(),
            train_c_head: TrainConfig::classification_head(),
            train_c_finetune: TrainConfig::classification_finetune(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Parses a possibly partial document; missing keys keep the values of
    /// [`RunConfig::default`], including inside nested tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(Self::default())?;
        merge(&mut base, user);
        Ok(base.try_into()?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising run config")
    }

    /// Writes `run_config.toml` into `dir`.
    pub fn archive(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Copies the run seed into the training configs.
    pub fn propagate_seed(&mut self) {
        for t in [
            &mut self.train_l,
            &mut self.train_c_head,
            &mut self.train_c_finetune,
            &mut self.ablation.head,
            &mut self.ablation.finetune,
        ] {
            t.seed = self.seed;
        }
    }

    pub fn model_l_seed(&self) -> u64 {
        derive_seed(self.seed, "model_l")
    }

    pub fn model_c_seed(&self) -> u64 {
        derive_seed(self.seed, "model_c")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.model_l.validate()?;
        self.model_c.validate()?;
        for t in [&self.train_l, &self.train_c_head, &self.train_c_finetune] {
            t.validate()?;
        }
        if self.ablation.seeds.is_empty() {
            bail!("ablation needs at least one seed");
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Output directory: explicit flag, then the config, then
/// `<root>/<command>` where `root` comes from the environment or `runs`.
pub fn resolve_output(
    flag: Option<&Path>,
    config: &RunConfig,
    env_root: Option<&Path>,
    command: &str,
) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| env_root.unwrap_or(Path::new("runs")).join(command))
}
