//! Stacked multi-view building damage assessment.
//!
//! A localization network masks building pixels in every view; a multi-view
//! classifier fuses the masked views of one building into a five-level
//! damage state. The crate carries its own small tensor/autodiff core, the
//! two networks, their training protocols, a synthetic multi-view dataset
//! generator and the evaluation metrics.

pub mod data;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
