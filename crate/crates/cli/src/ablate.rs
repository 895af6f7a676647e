//! Fused multi-view classifier against one single-view classifier per role.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mvdamage::data::{generate_in_memory, split_loaded, GeneratorConfig};
use mvdamage::models::{ModelC, ModelCConfig, ViewRole};
use mvdamage::seed::derive_seed;
use mvdamage::training::{classification_accuracy, train_model_c};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    /// Held-out accuracy of the fused model.
    pub fused: f64,
    /// Held-out accuracy per single-view model, keyed by role.
    pub single: BTreeMap<String, f64>,
    pub best_single_view: String,
    pub best_single: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_fused: f64,
    /// Mean over seeds of each seed's best single-view accuracy.
    pub mean_best_single: f64,
    /// `mean_fused - mean_best_single`.
    pub advantage: f64,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header = String::from("seed   fused");
        for r in ViewRole::ALL {
            let _ = write!(header, "  {:>9}", r.as_str());
        }
        writeln!(f, "{header}")?;
        for row in &self.rows {
            write!(f, "{:<5} {:>6.3}", row.seed, row.fused)?;
            for r in ViewRole::ALL {
                match row.single.get(r.as_str()) {
                    Some(a) => write!(f, "  {a:>9.3}")?,
                    None => write!(f, "  {:>9}", "-")?,
                }
            }
            writeln!(f)?;
        }
        writeln!(f, "mean fused accuracy:        {:.3}", self.mean_fused)?;
        writeln!(
            f,
            "mean best single-view:      {:.3}",
            self.mean_best_single
        )?;
        write!(
            f,
            "multi-view advantage:       {:+.1} points",
            100.0 * self.advantage
        )
    }
}

/// Trains one classifier with the ablation schedule and returns its test
/// accuracy on ground-truth-masked views.
fn run_one(
    model_cfg: ModelCConfig,
    cfg: &RunConfig,
    seed: u64,
    splits: &[Vec<mvdamage::data::LoadedSample>; 3],
) -> Result<f64> {
    let mut head = cfg.ablation.head.clone();
    let mut finetune = cfg.ablation.finetune.clone();
    head.seed = seed;
    finetune.seed = seed;
    let model = ModelC::new(model_cfg, derive_seed(seed, "model_c"))?;
    let outcome = train_model_c(model, &splits[0], &splits[1], &head, &finetune)?;
    Ok(classification_accuracy(&outcome.model, &splits[2])?)
}

pub fn ablate(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(String)) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let gen = GeneratorConfig {
            seed,
            ..cfg.ablation.generator.clone()
        };
        let splits = split_loaded(generate_in_memory(&gen)?, cfg.ablation.split, seed)?;
        let fused = run_one(cfg.model_c.clone(), cfg, seed, &splits)?;
        log(format!("seed {seed}: fused {fused:.3}"));
        let mut single = BTreeMap::new();
        for role in ViewRole::ALL {
            let model_cfg = ModelCConfig {
                views: vec![role],
                ..cfg.model_c.clone()
            };
            let acc = run_one(model_cfg, cfg, seed, &splits)?;
            log(format!("seed {seed}: {role} {acc:.3}"));
            single.insert(role.to_string(), acc);
        }
        // ties go to the earlier role
        let (best_single_view, best_single) = ViewRole::ALL
            .iter()
            .map(|r| (r.to_string(), single[r.as_str()]))
            .fold((String::new(), f64::NEG_INFINITY), |b, c| {
                if c.1 > b.1 {
                    c
                } else {
                    b
                }
            });
        rows.push(AblationRow {
            seed,
            fused,
            single,
            best_single_view,
            best_single,
        });
    }
    let n = rows.len() as f64;
    let mean_fused = rows.iter().map(|r| r.fused).sum::<f64>() / n;
    let mean_best_single = rows.iter().map(|r| r.best_single).sum::<f64>() / n;
    let report = AblationReport {
        rows,
        mean_fused,
        mean_best_single,
        advantage: mean_fused - mean_best_single,
    };
    cfg.archive(out)?;
    let path = out.join(ABLATION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}
