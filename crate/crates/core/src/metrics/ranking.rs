//! Precision-recall curves and average precision.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::segmentation::Detection;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApInterpolation {
    /// Area under the precision envelope over every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per ranked prediction.
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("confidence,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(s, "{:.8},{:.8},{:.8}", p.confidence, p.precision, p.recall);
        }
        s
    }
}

/// Ranks detections by confidence (descending, stable) and integrates the
/// interpolated precision-recall curve.
pub fn pr_curve_and_ap(
    detections: &[Detection],
    total_gt: usize,
    mode: ApInterpolation,
) -> Result<PrCurve> {
    if total_gt == 0 {
        return Err(Error::invalid(
            "average precision needs at least one ground-truth instance",
        ));
    }
    let mut ranked: Vec<&Detection> = detections.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut tp = 0usize;
    let points: Vec<PrPoint> = ranked
        .iter()
        .enumerate()
        .map(|(i, d)| {
            tp += usize::from(d.true_positive);
            PrPoint {
                confidence: d.confidence,
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / total_gt as f64,
            }
        })
        .collect();
    // envelope[i] = max precision at rank >= i
    let mut envelope = vec![0.0f64; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].precision);
        envelope[i] = run;
    }
    let ap = match mode {
        ApInterpolation::AllPoint => {
            let mut area = 0.0;
            for (i, d) in ranked.iter().enumerate() {
                if d.true_positive {
                    area += envelope[i];
                }
            }
            area / total_gt as f64
        }
        ApInterpolation::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let level = t as f64 / 10.0;
                sum += points
                    .iter()
                    .zip(&envelope)
                    .find(|(p, _)| p.recall >= level - 1e-12)
                    .map_or(0.0, |(_, &e)| e);
            }
            sum / 11.0
        }
    };
    Ok(PrCurve { points, ap })
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("mean AP of zero classes"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(confidence: f64, true_positive: bool) -> Detection {
        Detection {
            confidence,
            true_positive,
        }
    }

    #[test]
    fn single_tp() {
        let c = pr_curve_and_ap(&[det(0.7, true)], 1, ApInterpolation::AllPoint).unwrap();
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn fp_then_tp_is_half() {
        let c = pr_curve_and_ap(
            &[det(0.8, true), det(0.9, false)],
            1,
            ApInterpolation::AllPoint,
        )
        .unwrap();
        assert_eq!(c.ap, 0.5);
        assert_eq!(c.points[0].confidence, 0.9);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            pr_curve_and_ap(&[], 3, ApInterpolation::AllPoint)
                .unwrap()
                .ap,
            0.0
        );
        assert!(pr_curve_and_ap(&[det(0.5, false)], 0, ApInterpolation::AllPoint).is_err());
    }

    #[test]
    fn eleven_point_perfect() {
        let d = [det(0.9, true), det(0.8, true)];
        assert!(
            (pr_curve_and_ap(&d, 2, ApInterpolation::ElevenPoint)
                .unwrap()
                .ap
                - 1.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn map_cases() {
        assert_eq!(mean_ap(&[0.9198]).unwrap(), 0.9198);
        assert_eq!(mean_ap(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn csv_header() {
        let c = pr_curve_and_ap(&[det(0.5, true)], 1, ApInterpolation::AllPoint).unwrap();
        assert!(c
            .to_csv()
            .starts_with("confidence,precision,recall\n0.50000000,1.00000000,1.00000000"));
    }
}
