//! Reproducible runs of the damage-assessment pipeline: dataset generation,
//! training, evaluation and the multi-view ablation.

pub mod ablate;
pub mod commands;
pub mod config;

pub use ablate::{ablate, AblationReport, AblationRow, ABLATION_FILE};
pub use commands::{
    dataset_digest, dataset_dir, eval, file_digest, generate, train, EvalOptions, GenerateSummary,
    Stage, TrainSummary, MODEL_C_FILE, MODEL_C_LOG, MODEL_L_FILE, MODEL_L_LOG, PR_CURVE_FILE,
    REPORT_FILE,
};
pub use config::{resolve_output, AblationConfig, DataConfig, RunConfig, CONFIG_FILE};
