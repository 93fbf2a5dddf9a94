//! Early stopping and learning-rate decay on a validation plateau.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Epochs without improvement before the run stops.
    pub stop_patience: usize,
    /// Epochs without improvement before the learning rate is cut.
    pub decay_patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    /// Relative improvement that counts as progress.
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            stop_patience: 12,
            decay_patience: 4,
            decay_factor: 0.5,
            min_lr: 1e-6,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauStep {
    Improved,
    Waiting,
    /// Learning rate was cut; carries nothing, read the new value from the tracker.
    Decayed,
    Stop,
}

#[derive(Debug, Clone)]
pub struct PlateauTracker {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
    since_decay: usize,
}

impl PlateauTracker {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        PlateauTracker {
            config,
            lr,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> PlateauStep {
        if val_loss < self.best - self.config.min_delta * self.best.abs().min(1e300) {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_decay = 0;
            return PlateauStep::Improved;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= self.config.stop_patience {
            return PlateauStep::Stop;
        }
        if self.since_decay >= self.config.decay_patience && self.lr > self.config.min_lr {
            self.lr = (self.lr * self.config.decay_factor).max(self.config.min_lr);
            self.since_decay = 0;
            return PlateauStep::Decayed;
        }
        PlateauStep::Waiting
    }
}

/// One row of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_curve_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in logs {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
