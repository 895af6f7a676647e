//! Confusion matrices, accuracy and the coarse damage remap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DamageState;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Row-normalised rates; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion_and_accuracy(
    truth: &[usize],
    predicted: &[usize],
    k: usize,
) -> Result<(ConfusionMatrix, f64)> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("confusion matrix of zero samples"));
    }
    let mut m = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) outside 0..{k}"
            )));
        }
        m.counts[t][p] += 1;
    }
    let acc = m.accuracy();
    Ok((m, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseState {
    Minor,
    Moderate,
    Extreme,
}

impl CoarseState {
    pub const ALL: [CoarseState; 3] = [
        CoarseState::Minor,
        CoarseState::Moderate,
        CoarseState::Extreme,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CoarseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoarseState::Minor => "minor",
            CoarseState::Moderate => "moderate",
            CoarseState::Extreme => "extreme",
        })
    }
}

pub fn remap_coarse(fine: DamageState) -> CoarseState {
    match fine.level() {
        0 | 1 => CoarseState::Minor,
        2 | 3 => CoarseState::Moderate,
        _ => CoarseState::Extreme,
    }
}
