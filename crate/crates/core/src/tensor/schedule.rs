use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then inverse square-root decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { warmup_steps: 2000, peak_lr: 1e-3 }
    }
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, peak_lr: f64) -> Result<Self> {
        if warmup_steps == 0 || !(peak_lr > 0.0) {
            return Err(Error::config("warmup_steps and peak_lr must be positive"));
        }
        Ok(LrSchedule { warmup_steps, peak_lr })
    }

    /// Learning rate for 1-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::contract("learning-rate steps are 1-based"));
        }
        let w = self.warmup_steps as f64;
        let s = step as f64;
        Ok(if step <= self.warmup_steps { self.peak_lr * s / w } else { self.peak_lr * (w / s).sqrt() })
    }
}
