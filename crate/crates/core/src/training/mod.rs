//! Losses, the Adam optimizer and the two training protocols.

pub mod adam;
pub mod config;
pub mod log;
pub mod loss;
pub mod protocols;

pub use adam::AdamState;
pub use config::{LossKind, TrainConfig};
pub use log::{EarlyStopper, EpochRecord, StopReason, TrainLog};
pub use loss::{cross_entropy_loss, focal_loss, inverse_frequency_weights};
pub use protocols::{
    classification_accuracy, classification_score, oracle_inputs, segmentation_examples,
    segmentation_score, set_trainable, train_classifier_phase, train_model_c, train_model_l,
    train_model_l_with, SegExample, TrainOutcome, ValScore,
};
