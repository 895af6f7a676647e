//! Split-level evaluation of both models and the serialised report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classification::{confusion_and_accuracy, remap_coarse, ConfusionMatrix};
use super::ranking::{mean_ap, pr_curve_and_ap, ApInterpolation, PrCurve};
use super::segmentation::{
    extract_instances, iou, match_instances, precision_recall_f1, Detection,
};
use crate::data::{classify_with_masks, run_pipeline, LoadedSample, DEFAULT_MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::models::{binarize_mask, DamageState, ModelC, ModelL, NUM_DAMAGE_STATES};
use crate::tensor::Tensor;

pub const MATCH_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub mean_iou: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub pr_curve: PrCurve,
    pub map: f64,
    pub num_images: usize,
}

/// Scores per-image probability maps against ground-truth masks.
pub fn evaluate_segmentation(pairs: &[(Tensor<f32>, BinaryMask)]) -> Result<SegmentationMetrics> {
    if pairs.is_empty() {
        return Err(Error::invalid("segmentation evaluation over zero images"));
    }
    let (mut s_iou, mut s_p, mut s_r, mut s_f) = (0.0, 0.0, 0.0, 0.0);
    let mut detections: Vec<Detection> = Vec::new();
    let mut total_gt = 0;
    for (probs, gt) in pairs {
        let pred = binarize_mask(probs, DEFAULT_MASK_THRESHOLD)?;
        s_iou += iou(&pred, gt)?;
        let p_inst = extract_instances(&pred, Some(probs))?;
        let g_inst = extract_instances(gt, None)?;
        let m = match_instances(&p_inst, &g_inst, MATCH_IOU_THRESHOLD)?;
        let (p, r, f) = precision_recall_f1(&m);
        s_p += p;
        s_r += r;
        s_f += f;
        total_gt += g_inst.len();
        detections.extend(m.detections);
    }
    let n = pairs.len() as f64;
    let pr_curve = pr_curve_and_ap(&detections, total_gt, ApInterpolation::AllPoint)?;
    let map = mean_ap(&[pr_curve.ap])?;
    Ok(SegmentationMetrics {
        mean_iou: s_iou / n,
        mean_precision: s_p / n,
        mean_recall: s_r / n,
        mean_f1: s_f / n,
        pr_curve,
        map,
        num_images: pairs.len(),
    })
}

/// Every view of every sample is one image.
pub fn evaluate_model_l(model: &ModelL, samples: &[LoadedSample]) -> Result<SegmentationMetrics> {
    let mut pairs = Vec::new();
    for s in samples {
        for v in &s.views {
            pairs.push((model.predict(&v.image)?, v.mask.clone()));
        }
    }
    evaluate_segmentation(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy_fine: f64,
    pub accuracy_coarse: f64,
    pub confusion_fine: ConfusionMatrix,
    pub confusion_coarse: ConfusionMatrix,
    pub truth: Vec<DamageState>,
    pub predicted: Vec<DamageState>,
}

pub fn evaluate_labels(
    truth: &[DamageState],
    predicted: &[DamageState],
) -> Result<ClassificationMetrics> {
    let idx = |v: &[DamageState]| v.iter().map(|d| d.index()).collect::<Vec<_>>();
    let coarse = |v: &[DamageState]| {
        v.iter()
            .map(|&d| remap_coarse(d).index())
            .collect::<Vec<_>>()
    };
    let (confusion_fine, accuracy_fine) =
        confusion_and_accuracy(&idx(truth), &idx(predicted), NUM_DAMAGE_STATES)?;
    let (confusion_coarse, accuracy_coarse) =
        confusion_and_accuracy(&coarse(truth), &coarse(predicted), 3)?;
    Ok(ClassificationMetrics {
        accuracy_fine,
        accuracy_coarse,
        confusion_fine,
        confusion_coarse,
        truth: truth.to_vec(),
        predicted: predicted.to_vec(),
    })
}

/// Runs the stacked pipeline per building, or classifies with
/// ground-truth masks when `model_l` is `None`.
pub fn evaluate_model_c(
    model_l: Option<&ModelL>,
    model_c: &ModelC,
    samples: &[LoadedSample],
) -> Result<ClassificationMetrics> {
    let mut predicted = Vec::with_capacity(samples.len());
    for s in samples {
        let out = match model_l {
            Some(l) => run_pipeline(l, model_c, s, DEFAULT_MASK_THRESHOLD)?,
            None => {
                classify_with_masks(model_c, s, s.views.iter().map(|v| v.mask.clone()).collect())?
            }
        };
        predicted.push(out.prediction);
    }
    let truth: Vec<DamageState> = samples.iter().map(|s| s.label).collect();
    evaluate_labels(&truth, &predicted)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oracle_masks: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_per_class: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    pub accuracy_fine: f64,
    pub accuracy_coarse: f64,
    pub confusion_fine: Vec<Vec<u64>>,
    pub confusion_coarse: Vec<Vec<u64>>,
    pub num_buildings: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_images: Option<usize>,
}

impl MetricsReport {
    pub fn new(seg: Option<&SegmentationMetrics>, cls: &ClassificationMetrics) -> Self {
        Self {
            oracle_masks: seg.is_none(),
            mean_iou: seg.map(|s| s.mean_iou),
            mean_precision: seg.map(|s| s.mean_precision),
            mean_recall: seg.map(|s| s.mean_recall),
            mean_f1: seg.map(|s| s.mean_f1),
            ap_per_class: seg.map(|s| vec![s.pr_curve.ap]),
            map: seg.map(|s| s.map),
            accuracy_fine: cls.accuracy_fine,
            accuracy_coarse: cls.accuracy_coarse,
            confusion_fine: cls.confusion_fine.counts.clone(),
            confusion_coarse: cls.confusion_coarse.counts.clone(),
            num_buildings: cls.truth.len(),
            num_images: seg.map(|s| s.num_images),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("serialising metrics: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}
