//! `generate`, `train` and `eval`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mvdamage::data::{
    generate_synthetic_dataset, load_manifest, split_dataset, split_sizes, Dataset, Split,
};
use mvdamage::metrics::{evaluate_model_c, evaluate_model_l, MetricsReport};
use mvdamage::models::{ModelC, ModelL};
use mvdamage::training::{segmentation_examples, train_model_c, train_model_l, TrainLog};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MODEL_L_FILE: &str = "model_l.ckpt";
pub const MODEL_C_FILE: &str = "model_c.ckpt";
pub const MODEL_L_LOG: &str = "train_l_log.csv";
pub const MODEL_C_LOG: &str = "train_c_log.csv";
pub const REPORT_FILE: &str = "metrics.json";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";

/// SHA-256 over the manifest and every file it references, in manifest order.
pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(dataset.manifest.to_json()?.as_bytes());
    for s in &dataset.manifest.samples {
        for v in &s.views {
            for rel in [&v.image, &v.mask] {
                let path = dataset.root.join(rel);
                let bytes =
                    fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                h.update(rel.as_bytes());
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub root: PathBuf,
    pub n_buildings: usize,
    pub n_images: usize,
    /// `[train, val, test]`.
    pub split_counts: [usize; 3],
    pub digest: String,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [tr, va, te] = self.split_counts;
        writeln!(f, "dataset: {}", self.root.display())?;
        writeln!(
            f,
            "buildings: {}  images: {}",
            self.n_buildings, self.n_images
        )?;
        writeln!(f, "split: train {tr} / val {va} / test {te}")?;
        write!(f, "digest: {}", self.digest)
    }
}

/// Renders the configured synthetic dataset into `out` and assigns splits
/// with the generator seed.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    let gen = &cfg.data.generator;
    split_sizes(gen.n_buildings, cfg.data.split)?;
    gen.validate()?;
    let manifest = generate_synthetic_dataset(gen, out)?;
    let manifest = split_dataset(&manifest, cfg.data.split, gen.seed)?;
    manifest.write(out)?;
    let mut archived = cfg.clone();
    archived.data.path = Some(out.to_path_buf());
    archived.archive(out)?;
    let dataset = load_manifest(out)?;
    Ok(GenerateSummary {
        root: out.to_path_buf(),
        n_buildings: manifest.samples.len(),
        n_images: manifest.samples.iter().map(|s| s.views.len()).sum(),
        split_counts: manifest.split_counts(),
        digest: dataset_digest(&dataset)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Loc,
    Cls,
    All,
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loc" => Ok(Stage::Loc),
            "cls" => Ok(Stage::Cls),
            "all" => Ok(Stage::All),
            other => bail!("unknown stage `{other}` (expected loc, cls or all)"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub model_l: Option<(PathBuf, TrainLog)>,
    pub model_c: Option<(PathBuf, TrainLog)>,
}

pub fn dataset_dir(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| anyhow!("no dataset given: pass --data or set data.path in the config"))
}

/// Trains the requested stage(s) on the dataset's train split (validating
/// on val) and writes checkpoints and epoch logs into `out`.
pub fn train(
    cfg: &RunConfig,
    stage: Stage,
    data: &Path,
    out: &Path,
    log: &mut dyn FnMut(String),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset =
        load_manifest(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut archived = cfg.clone();
    archived.data.path = Some(data.to_path_buf());
    archived.archive(out)?;
    let mut summary = TrainSummary::default();
    if matches!(stage, Stage::Loc | Stage::All) {
        log(format!("training Model-L on {} images", train.len() * 5));
        let model = ModelL::new(cfg.model_l.clone(), cfg.model_l_seed())?;
        let outcome = train_model_l(
            model,
            &segmentation_examples(&train),
            &segmentation_examples(&val),
            &cfg.train_l,
        )?;
        let path = out.join(MODEL_L_FILE);
        outcome.model.save(&path)?;
        outcome.log.write_csv(&out.join(MODEL_L_LOG))?;
        log(format!(
            "Model-L: {} epochs, {}, best epoch {}",
            outcome.log.entries.len(),
            outcome.log.stop_reason,
            outcome.log.best_epoch
        ));
        summary.model_l = Some((path, outcome.log));
    }
    if matches!(stage, Stage::Cls | Stage::All) {
        log(format!("training Model-C on {} buildings", train.len()));
        let model = ModelC::new(cfg.model_c.clone(), cfg.model_c_seed())?;
        let outcome = train_model_c(
            model,
            &train,
            &val,
            &cfg.train_c_head,
            &cfg.train_c_finetune,
        )?;
        let path = out.join(MODEL_C_FILE);
        outcome.model.save(&path)?;
        outcome.log.write_csv(&out.join(MODEL_C_LOG))?;
        log(format!(
            "Model-C: {} epochs over two phases",
            outcome.log.entries.len()
        ));
        summary.model_c = Some((path, outcome.log));
    }
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub data: PathBuf,
    pub split: Split,
    pub oracle_masks: bool,
    pub model_l: PathBuf,
    pub model_c: PathBuf,
    pub report: PathBuf,
}

/// Loads a checkpoint and insists its architecture matches the config.
fn load_model_l(path: &Path, cfg: &RunConfig) -> Result<ModelL> {
    let m = ModelL::load(path).with_context(|| format!("loading {}", path.display()))?;
    if m.config != cfg.model_l {
        bail!(
            "{} was trained with a different Model-L architecture than the config describes",
            path.display()
        );
    }
    Ok(m)
}

fn load_model_c(path: &Path, cfg: &RunConfig) -> Result<ModelC> {
    let m = ModelC::load(path).with_context(|| format!("loading {}", path.display()))?;
    if m.config != cfg.model_c {
        bail!(
            "{} was trained with a different Model-C architecture than the config describes",
            path.display()
        );
    }
    Ok(m)
}

/// Scores the checkpoints on one split; writes the report, the PR curve
/// (stacked mode only) and the archived config next to the report.
pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<MetricsReport> {
    let dataset = load_manifest(&opts.data)
        .with_context(|| format!("loading dataset {}", opts.data.display()))?;
    let samples = dataset.load_split(opts.split)?;
    let model_c = load_model_c(&opts.model_c, cfg)?;
    let dir = opts
        .report
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = if opts.oracle_masks {
        MetricsReport::new(None, &evaluate_model_c(None, &model_c, &samples)?)
    } else {
        let model_l = load_model_l(&opts.model_l, cfg)?;
        let seg = evaluate_model_l(&model_l, &samples)?;
        let cls = evaluate_model_c(Some(&model_l), &model_c, &samples)?;
        let curve = dir.join(PR_CURVE_FILE);
        fs::write(&curve, seg.pr_curve.to_csv())
            .with_context(|| format!("writing {}", curve.display()))?;
        MetricsReport::new(Some(&seg), &cls)
    };
    report.write(&opts.report)?;
    let mut archived = cfg.clone();
    archived.data.path = Some(opts.data.clone());
    archived.archive(dir)?;
    Ok(report)
}
