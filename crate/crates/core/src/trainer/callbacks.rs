//! Validation-loss driven learning-rate reduction and early stopping.
//!
//! An epoch counts as an improvement when the loss drops below the best
//! value seen so far by strictly more than `min_delta`.

use crate::error::{Error, Result};

fn check_patience(patience: usize) -> Result<()> {
    if patience == 0 {
        return Err(Error::invalid("patience must be at least 1"));
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement, then restarts the count.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    patience: usize,
    factor: f64,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(patience: usize, factor: f64, min_delta: f64) -> Result<Self> {
        check_patience(patience)?;
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor {factor} outside (0, 1)")));
        }
        Ok(ReduceLrOnPlateau {
            patience,
            factor,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Consumes one epoch's validation loss and returns the learning rate
    /// for the next epoch.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Learning rate in effect after each epoch of `val_losses`.
pub fn reduce_lr_on_plateau(
    val_losses: &[f64],
    lr0: f64,
    patience: usize,
    factor: f64,
    min_delta: f64,
) -> Result<Vec<f64>> {
    let mut sched = ReduceLrOnPlateau::new(patience, factor, min_delta)?;
    let mut lr = lr0;
    Ok(val_losses
        .iter()
        .map(|&v| {
            lr = sched.step(v, lr);
            lr
        })
        .collect())
}

/// Stops after `patience` epochs without improvement. Separately tracks the
/// epoch with the lowest loss (first one on ties), whose weights get
/// restored.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    reference: f64,
    wait: usize,
    best_loss: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        check_patience(patience)?;
        Ok(EarlyStopping {
            patience,
            min_delta,
            reference: f64::INFINITY,
            wait: 0,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        })
    }

    /// Records `epoch` (1-based); returns true when training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
        }
        if val_loss < self.reference - self.min_delta {
            self.reference = val_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.wait >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

/// Replays a validation-loss history; returns `(stop_epoch, best_epoch)`,
/// 1-based, with `stop_epoch = None` if the patience never ran out.
pub fn early_stopping(val_losses: &[f64], patience: usize, min_delta: f64) -> Result<(Option<usize>, usize)> {
    let mut es = EarlyStopping::new(patience, min_delta)?;
    for (i, &v) in val_losses.iter().enumerate() {
        if es.update(i + 1, v) {
            return Ok((Some(i + 1), es.best_epoch()));
        }
    }
    Ok((None, es.best_epoch()))
}
