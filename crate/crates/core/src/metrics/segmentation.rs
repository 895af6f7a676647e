//! Mask overlap, connected-component instances and greedy matching.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One connected component of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub confidence: f64,
}

impl Instance {
    pub fn new(mut pixels: Vec<usize>, confidence: f64) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { pixels, confidence }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn iou(&self, other: &Instance) -> f64 {
        let (mut i, mut j, mut inter) = (0, 0, 0usize);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let union = self.area() + other.area() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::filled(height, width, false);
        for &p in &self.pixels {
            m.set(p / width, p % width, true);
        }
        m
    }
}

/// 4-connected components, ordered by their first pixel in row-major
/// order. Confidence is the mean of `probabilities` over the component,
/// or 1 without probabilities.
pub fn extract_instances(
    mask: &BinaryMask,
    probabilities: Option<&Tensor<f32>>,
) -> Result<Vec<Instance>> {
    let (h, w) = mask.dims();
    if let Some(p) = probabilities {
        if p.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "extract_instances",
                lhs: vec![h, w],
                rhs: p.shape().to_vec(),
            });
        }
    }
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        pixels.sort_unstable();
        let confidence = match probabilities {
            Some(p) => {
                pixels.iter().map(|&i| p.data()[i] as f64).sum::<f64>() / pixels.len() as f64
            }
            None => 1.0,
        };
        out.push(Instance { pixels, confidence });
    }
    Ok(out)
}

/// A scored prediction and whether it matched a ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, ground-truth index, IoU)` for true positives.
    pub pairs: Vec<(usize, usize, f64)>,
    /// One entry per prediction, in input order.
    pub detections: Vec<Detection>,
}

/// Greedy matching in descending confidence order (ties keep input order).
/// Each prediction takes the unmatched ground truth of highest IoU and is a
/// true positive iff that IoU is at least `threshold`.
pub fn match_instances(
    predictions: &[Instance],
    ground_truth: &[Instance],
    threshold: f64,
) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {threshold} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .confidence
            .total_cmp(&predictions[a].confidence)
    });
    let mut taken = vec![false; ground_truth.len()];
    let mut result = MatchResult {
        detections: predictions
            .iter()
            .map(|p| Detection {
                confidence: p.confidence,
                true_positive: false,
            })
            .collect(),
        ..MatchResult::default()
    };
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in ground_truth.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = predictions[pi].iou(g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= threshold => {
                taken[gi] = true;
                result.tp += 1;
                result.pairs.push((pi, gi, v));
                result.detections[pi].true_positive = true;
            }
            _ => result.fp += 1,
        }
    }
    result.fn_ = ground_truth.len() - result.tp;
    Ok(result)
}

/// `(precision, recall, F1)`, each 0 when its denominator is 0.
pub fn precision_recall_f1(m: &MatchResult) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}
