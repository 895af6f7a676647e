//! Per-epoch training records and the early-stopping rule.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across phases.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean IoU for Model-L, accuracy for Model-C.
    pub val_metric: f64,
    pub phase: u8,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_metric,phase,lr\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{:.8},{:.8},{:.6},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_metric, e.phase, e.learning_rate
            );
        }
        let _ = writeln!(
            s,
            "# stop_reason={} best_epoch={}",
            self.stop_reason, self.best_epoch
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn phase_entries(&self, phase: u8) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter(move |e| e.phase == phase)
    }
}

/// Tracks the best validation loss; signals a stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_on_first_rise() {
        let mut s = EarlyStopper::new(1);
        assert!(s.observe(1, 0.5));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 0.6));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn plateau_counts_as_no_improvement() {
        let mut s = EarlyStopper::new(3);
        s.observe(1, 1.0);
        s.observe(2, 1.0);
        s.observe(3, 0.9);
        s.observe(4, 0.95);
        s.observe(5, 0.9);
        assert!(!s.should_stop());
        s.observe(6, 0.91);
        assert!(s.should_stop());
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            entries: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_metric: 0.75,
                phase: 1,
                learning_rate: 1e-3,
            }],
            stop_reason: StopReason::MaxEpochs,
            best_epoch: 1,
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,val_metric,phase,lr");
        assert!(lines[1].starts_with("1,0.5"));
        assert!(lines[1].ends_with(",1,0.001"));
        assert_eq!(lines[2], "# stop_reason=max-epochs best_epoch=1");
    }
}
