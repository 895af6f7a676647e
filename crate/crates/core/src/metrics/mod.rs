//! Segmentation and classification metrics.

mod classification;
mod evaluate;
mod ranking;
mod segmentation;

pub use classification::{confusion_and_accuracy, remap_coarse, CoarseState, ConfusionMatrix};
pub use evaluate::{
    evaluate_labels, evaluate_model_c, evaluate_model_l, evaluate_segmentation,
    ClassificationMetrics, MetricsReport, SegmentationMetrics, MATCH_IOU_THRESHOLD,
};
pub use ranking::{mean_ap, pr_curve_and_ap, ApInterpolation, PrCurve, PrPoint};
pub use segmentation::{
    extract_instances, iou, match_instances, precision_recall_f1, Detection, Instance, MatchResult,
};
