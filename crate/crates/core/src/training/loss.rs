//! Focal and cross-entropy losses on probability vectors.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before the log.
pub const PROB_CLIP: f64 = 1e-7;

/// `-alpha·(1-p)^gamma·ln p` for the true-class probability `p` (clipped),
/// together with its derivative in `p`. The derivative is zero where the
/// clip is active.
pub fn focal_value_and_slope<T: Real>(p: T, gamma: T, alpha: T) -> (T, T) {
    let lo = T::lit(PROB_CLIP);
    let hi = T::one() - lo;
    let clipped = p < lo || p > hi;
    let pc = p.max(lo).min(hi);
    let q = T::one() - pc;
    let log_p = pc.ln();
    let value = if gamma == T::zero() {
        -alpha * log_p
    } else {
        -alpha * q.powf(gamma) * log_p
    };
    if clipped {
        return (value, T::zero());
    }
    let slope = if gamma == T::zero() {
        -alpha / pc
    } else {
        alpha * (gamma * q.powf(gamma - T::one()) * log_p - q.powf(gamma) / pc)
    };
    (value, slope)
}

fn check_distribution(probabilities: &[f64], true_class: usize) -> Result<()> {
    if true_class >= probabilities.len() {
        return Err(Error::invalid(format!(
            "class index {true_class} outside 0..{}",
            probabilities.len()
        )));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "probabilities sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Focal loss of one probability vector against its true class.
pub fn focal_loss(
    probabilities: &[f64],
    true_class: usize,
    gamma: f64,
    alpha: &[f64],
) -> Result<f64> {
    check_distribution(probabilities, true_class)?;
    if alpha.len() != probabilities.len() {
        return Err(Error::invalid(format!(
            "{} class weights for {} classes",
            alpha.len(),
            probabilities.len()
        )));
    }
    if gamma < 0.0 || alpha.iter().any(|&a| a <= 0.0) {
        return Err(Error::invalid(
            "focal loss needs gamma >= 0 and positive class weights",
        ));
    }
    Ok(focal_value_and_slope(probabilities[true_class], gamma, alpha[true_class]).0)
}

/// `-ln p_y` with the same clipping as [`focal_loss`].
pub fn cross_entropy_loss(probabilities: &[f64], true_class: usize) -> Result<f64> {
    check_distribution(probabilities, true_class)?;
    Ok(focal_value_and_slope(probabilities[true_class], 0.0, 1.0).0)
}

/// Inverse class frequencies rescaled to mean 1. Classes absent from
/// `labels` get the largest weight of the present ones.
pub fn inverse_frequency_weights(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l < k {
            counts[l] += 1;
        }
    }
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| 1.0 / c as f64))
        .collect();
    let fallback = raw.iter().flatten().copied().fold(1.0f64, f64::max);
    let raw: Vec<f64> = raw.into_iter().map(|r| r.unwrap_or(fallback)).collect();
    let mean = raw.iter().sum::<f64>() / k as f64;
    raw.into_iter().map(|r| r / mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two(p: f64) -> [f64; 2] {
        [1.0 - p, p]
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let l = focal_loss(&[0.0, 1.0], 1, 2.0, &[1.0, 1.0]).unwrap();
        assert!(l >= 0.0 && l <= 1e-6, "{l}");
        assert!(cross_entropy_loss(&[0.0, 1.0], 1).unwrap() <= 1e-6);
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let l = focal_loss(&two(0.5), 1, 0.0, &[1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gamma_two_closed_form() {
        let l = focal_loss(&two(0.5), 1, 2.0, &[1.0, 1.0]).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_five() {
        let u = [0.2; 5];
        assert!((cross_entropy_loss(&u, 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((cross_entropy_loss(&[0.2, 0.8], 0).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_class_rejected() {
        assert!(focal_loss(&two(0.5), 2, 2.0, &[1.0, 1.0]).is_err());
        assert!(cross_entropy_loss(&two(0.5), 5).is_err());
    }

    #[test]
    fn slope_matches_finite_difference() {
        for &gamma in &[0.0, 0.5, 2.0] {
            for &p in &[0.05, 0.3, 0.77, 0.99] {
                let h = 1e-7;
                let fd: f64 = (focal_value_and_slope(p + h, gamma, 1.3).0
                    - focal_value_and_slope(p - h, gamma, 1.3).0)
                    / (2.0 * h);
                let an: f64 = focal_value_and_slope(p, gamma, 1.3).1;
                assert!(
                    (fd - an).abs() / an.abs() < 1e-6,
                    "gamma {gamma} p {p}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn inverse_frequency_has_mean_one() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1, 2, 2], 3);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(w[1] > w[2] && w[2] > w[0]);
    }
}
