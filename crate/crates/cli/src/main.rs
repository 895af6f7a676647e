use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use mvdamage::data::Split;
use mvdamage::models::FusionMode;
use mvdamage_cli::{
    ablate, dataset_dir, eval, generate, resolve_output, train, EvalOptions, RunConfig, Stage,
    MODEL_C_FILE, MODEL_L_FILE, PR_CURVE_FILE, REPORT_FILE,
};

#[derive(Parser)]
#[command(
    name = "mvdamage",
    version,
    about = "Multi-view building damage assessment"
)]
struct Cli {
    /// Default root for output directories.
    #[arg(long, global = true, env = "MVDAMAGE_OUT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// One backbone shared by every view.
    #[arg(long)]
    shared_backbone: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(f) = self.fusion {
            cfg.model_c.fusion = f;
        }
        if self.shared_backbone {
            cfg.model_c.shared_backbone = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and assign splits.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buildings: Option<usize>,
        /// Five comma-separated damage-state proportions.
        #[arg(long, value_delimiter = ',')]
        class_mix: Option<Vec<f64>>,
        #[arg(long)]
        directional_fraction: Option<f64>,
        #[arg(long)]
        clutter_density: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train,val,test fractions.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<f64>>,
    },
    /// Train Model-L, Model-C or both.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Stage,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score checkpoints on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding model_l.ckpt and model_c.ckpt.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        model_l: Option<PathBuf>,
        #[arg(long)]
        model_c: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Classify ground-truth-masked views and skip Model-L.
        #[arg(long)]
        oracle_masks: bool,
        /// Report path; defaults to metrics.json in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Fused classifier against single-view classifiers.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        buildings: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load_or_default(common.config.as_deref())
}

fn progress(msg: String) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root.as_deref();
    match cli.command {
        Command::Generate {
            common,
            buildings,
            class_mix,
            directional_fraction,
            clutter_density,
            image_size,
            seed,
            split,
        } => {
            let mut cfg = load(&common)?;
            let g = &mut cfg.data.generator;
            if let Some(n) = buildings {
                g.n_buildings = n;
            }
            if let Some(m) = class_mix {
                if m.len() != g.class_mix.len() {
                    bail!("--class-mix needs {} values, got {}", g.class_mix.len(), m.len());
                }
                g.class_mix.copy_from_slice(&m);
            }
            if let Some(d) = directional_fraction {
                g.directional_fraction = d;
            }
            if let Some(c) = clutter_density {
                g.clutter_density = c;
            }
            if let Some(s) = image_size {
                g.image_size = s;
            }
            if let Some(s) = seed {
                g.seed = s;
            }
            if let Some(s) = split {
                if s.len() != 3 {
                    bail!("--split needs 3 values, got {}", s.len());
                }
                cfg.data.split.copy_from_slice(&s);
            }
            let out = resolve_output(common.out.as_deref(), &cfg, root, "generate");
            let summary = generate(&cfg, &out)?;
            println!("{summary}");
        }
        Command::Train {
            common,
            stage,
            data,
            seed,
            model,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.propagate_seed();
            model.apply(&mut cfg);
            let data = dataset_dir(data.as_deref(), &cfg)?;
            let out = resolve_output(common.out.as_deref(), &cfg, root, "train");
            let summary = train(&cfg, stage, &data, &out, &mut progress)?;
            for (path, _) in summary.model_l.iter().chain(&summary.model_c) {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval {
            common,
            data,
            checkpoints,
            model_l,
            model_c,
            split,
            oracle_masks,
            report,
            model,
        } => {
            let mut cfg = load(&common)?;
            model.apply(&mut cfg);
            let data = dataset_dir(data.as_deref(), &cfg)?;
            let out = resolve_output(common.out.as_deref(), &cfg, root, "eval");
            let ckpt = checkpoints.unwrap_or_else(|| resolve_output(None, &cfg, root, "train"));
            let opts = EvalOptions {
                data,
                split,
                oracle_masks,
                model_l: model_l.unwrap_or_else(|| ckpt.join(MODEL_L_FILE)),
                model_c: model_c.unwrap_or_else(|| ckpt.join(MODEL_C_FILE)),
                report: report.unwrap_or_else(|| out.join(REPORT_FILE)),
            };
            for p in [&opts.model_c]
                .into_iter()
                .chain((!oracle_masks).then_some(&opts.model_l))
            {
                if !p.exists() {
                    bail!("checkpoint {} not found", p.display());
                }
            }
            let r = eval(&cfg, &opts)?;
            if let Some(iou) = r.mean_iou {
                println!(
                    "mean IoU {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  mAP {:.4}",
                    iou,
                    r.mean_precision.unwrap_or(0.0),
                    r.mean_recall.unwrap_or(0.0),
                    r.mean_f1.unwrap_or(0.0),
                    r.map.unwrap_or(0.0)
                );
                let curve = opts
                    .report
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(PR_CURVE_FILE);
                println!("wrote {}", curve.display());
            }
            println!(
                "accuracy fine {:.4}  coarse {:.4}  ({} buildings{})",
                r.accuracy_fine,
                r.accuracy_coarse,
                r.num_buildings,
                if r.oracle_masks { ", oracle masks" } else { "" }
            );
            println!("wrote {}", opts.report.display());
        }
        Command::Ablate {
            common,
            seeds,
            buildings,
            model,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            if let Some(n) = buildings {
                cfg.ablation.generator.n_buildings = n;
            }
            model.apply(&mut cfg);
            let out = resolve_output(common.out.as_deref(), &cfg, root, "ablate");
            let report = ablate(&cfg, &out, &mut progress)?;
            println!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
