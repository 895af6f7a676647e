//! Building localization (Model-L) and damage classification (Model-C).

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod localization;
pub mod types;

pub use backbone::{build_backbone, Backbone, BackboneConfig, BlockSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, Architecture};
pub use classifier::{argmax_lowest, multi_view_fuse, ModelC, ModelCConfig};
pub use localization::{apply_mask, binarize_mask, pyramid_pooling_forward, ModelL, ModelLConfig};
pub use types::{DamageState, FusionMode, ViewRole, NUM_DAMAGE_STATES};
