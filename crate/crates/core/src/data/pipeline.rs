//! Stacked inference: Model-L masks every view, Model-C classifies the masked views.

use super::manifest::LoadedSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::models::{apply_mask, argmax_lowest, binarize_mask, DamageState, ModelC, ModelL};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// One mask per view, in `ViewRole::ALL` order.
    pub masks: Vec<BinaryMask>,
    pub prediction: DamageState,
    pub probabilities: Vec<f32>,
}

/// Classifies a building from explicit per-view masks (`ViewRole::ALL` order).
pub fn classify_with_masks(
    model_c: &ModelC,
    sample: &LoadedSample,
    masks: Vec<BinaryMask>,
) -> Result<PipelineOutput> {
    if masks.len() != sample.views.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} views",
            masks.len(),
            sample.views.len()
        )));
    }
    let inputs: Vec<Tensor<f32>> = model_c
        .config
        .views
        .iter()
        .map(|&role| apply_mask(&sample.view(role).image, &masks[role.index()]))
        .collect::<Result<_>>()?;
    let probabilities = model_c.predict(&inputs)?;
    let prediction = DamageState::new(argmax_lowest(&probabilities) as u8)?;
    Ok(PipelineOutput {
        masks,
        prediction,
        probabilities,
    })
}

/// Full stacked pipeline.
pub fn run_pipeline(
    model_l: &ModelL,
    model_c: &ModelC,
    sample: &LoadedSample,
    threshold: f64,
) -> Result<PipelineOutput> {
    let masks = sample
        .views
        .iter()
        .map(|v| binarize_mask(&model_l.predict(&v.image)?, threshold))
        .collect::<Result<Vec<_>>>()?;
    classify_with_masks(model_c, sample, masks)
}

/// Pipeline with ground-truth masks standing in for Model-L.
pub fn run_pipeline_oracle(model_c: &ModelC, sample: &LoadedSample) -> Result<PipelineOutput> {
    classify_with_masks(
        model_c,
        sample,
        sample.views.iter().map(|v| v.mask.clone()).collect(),
    )
}
