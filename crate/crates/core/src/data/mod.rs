//! Synthetic multi-view data, manifests, augmentation and the stacked pipeline.

pub mod augment;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod synthetic;

pub use augment::{augment, AugmentConfig, AugmentOp};
pub use manifest::{
    load_manifest, split_dataset, split_loaded, split_sizes, Dataset, DatasetManifest,
    LoadedSample, Provenance, SampleEntry, Split, ViewData, ViewEntry, MANIFEST_FILE,
    MANIFEST_VERSION,
};
pub use pipeline::{
    classify_with_masks, run_pipeline, run_pipeline_oracle, PipelineOutput, DEFAULT_MASK_THRESHOLD,
};
pub use synthetic::{
    generate_in_memory, generate_synthetic_dataset, render_building, render_sample,
    GeneratorConfig, SyntheticSceneSpec,
};
