use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};

/// Linear warmup to `peak_lr`, then cosine decay to `alpha · peak_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub alpha: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl CosineSchedule {
    pub fn new(peak_lr: f64, alpha: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DeptError::InvalidArgument(format!("decay alpha {alpha} outside [0, 1]")));
        }
        if !(peak_lr >= 0.0) {
            return Err(DeptError::InvalidArgument(format!("peak lr {peak_lr} must be >= 0")));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(DeptError::InvalidArgument(format!(
                "need warmup_steps ({warmup_steps}) < total_steps ({total_steps})"
            )));
        }
        Ok(Self { peak_lr, alpha, total_steps, warmup_steps })
    }

    /// Warmup of 1% of the total steps.
    pub fn with_default_warmup(peak_lr: f64, alpha: f64, total_steps: u64) -> Result<Self> {
        Self::new(peak_lr, alpha, total_steps, total_steps / 100)
    }

    /// Learning rate at `step`; steps past the end clamp to the final value.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak_lr * (self.alpha + (1.0 - self.alpha) * cosine)
    }
}
