use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup / hold / decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriStage {
    pub peak_lr: f64,
    pub total_steps: usize,
    /// Fractions of `total_steps` spent warming up, holding and decaying.
    pub stage_fractions: [f64; 3],
    /// Learning rate at the last step, as a fraction of the peak.
    pub final_ratio: f64,
}

impl TriStage {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr", "must be > 0"));
        }
        if self.stage_fractions.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::config("stage_fractions", "each fraction must be > 0"));
        }
        if (self.stage_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("stage_fractions", "must sum to 1"));
        }
        if !(self.final_ratio > 0.0 && self.final_ratio <= 1.0) {
            return Err(Error::config("final_lr_ratio", "must be in (0, 1]"));
        }
        Ok(())
    }

    fn boundaries(&self) -> (f64, f64, f64) {
        let total = self.total_steps as f64;
        let warmup = self.stage_fractions[0] * total;
        let hold_end = warmup + self.stage_fractions[1] * total;
        (warmup, hold_end, total)
    }

    /// Learning rate at `step` (0 ..= total_steps); clamps past the end.
    pub fn lr(&self, step: usize) -> f64 {
        let (warmup, hold_end, total) = self.boundaries();
        let s = (step as f64).min(total);
        if s < warmup {
            self.peak_lr * s / warmup
        } else if s <= hold_end {
            self.peak_lr
        } else {
            let progress = (s - hold_end) / (total - hold_end);
            self.peak_lr * (self.final_ratio.ln() * progress).exp()
        }
    }
}
