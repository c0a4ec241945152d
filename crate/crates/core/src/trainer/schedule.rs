use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch-indexed λ ramp: −1 before `hold`, linear to +1 at `end`, +1 after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlSchedule {
    pub hold: usize,
    pub end: usize,
    /// Use `m = λ` instead of `m = −λ` for the reversal multiplier.
    pub raw_sign: bool,
}

impl GrlSchedule {
    pub fn new(hold: usize, end: usize) -> Result<Self> {
        let s = GrlSchedule {
            hold,
            end,
            raw_sign: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.end <= self.hold {
            return Err(Error::Config(format!(
                "train.grl_end ({}) must exceed train.grl_hold ({})",
                self.end, self.hold
            )));
        }
        Ok(())
    }

    pub fn lambda(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::Contract(format!("epoch must be non-negative, got {epoch}")));
        }
        let (e, hold, end) = (epoch as f64, self.hold as f64, self.end as f64);
        Ok(if e < hold {
            -1.0
        } else if e <= end {
            -1.0 + 2.0 * (e - hold) / (end - hold)
        } else {
            1.0
        })
    }

    /// Backward multiplier of every reversal node at `epoch`.
    pub fn multiplier(&self, epoch: i64) -> Result<f64> {
        let l = self.lambda(epoch)?;
        Ok(if self.raw_sign { l } else { -l })
    }
}

/// Multiplies the learning rate by `factor` once the monitored score has
/// gone `patience` consecutive epochs without improving by more than
/// `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauLr {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauLr {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Result<Self> {
        if !(lr > 0.0 && factor > 0.0 && factor < 1.0 && patience >= 1 && threshold >= 0.0) {
            return Err(Error::Config(format!(
                "plateau schedule needs lr > 0, 0 < factor < 1, patience >= 1: lr {lr}, factor {factor}, patience {patience}"
            )));
        }
        Ok(PlateauLr {
            lr,
            factor,
            patience,
            threshold,
            best: None,
            stale: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's score and returns the learning rate for the next.
    pub fn observe(&mut self, score: f64) -> f64 {
        match self.best {
            Some(b) if !(score > b + self.threshold) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(score);
                self.stale = 0;
            }
        }
        self.lr
    }
}
