use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};
use crate::optim::{AdamWConfig, CosineSchedule};
use crate::variant::Variant;

/// Which method runs and how its steps are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    /// T, the number of outer rounds. Baselines use it only to space evaluations.
    pub rounds: u64,
    /// N_local, inner steps per round.
    pub local_steps: u64,
    /// |S_t|; defaults to every source.
    #[serde(default)]
    pub sources_per_round: Option<usize>,
    pub batch_size: usize,
    /// Sampling temperature for STD and ACT.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Forgetting period for ACT, in steps.
    #[serde(default)]
    pub forget_every: Option<u64>,
    pub seed: u64,
}

impl VariantConfig {
    /// N = N_local · T.
    pub fn total_steps(&self) -> u64 {
        self.rounds * self.local_steps
    }

    pub fn selected(&self, num_sources: usize) -> usize {
        self.sources_per_round.unwrap_or(num_sources)
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(0.0)
    }

    pub fn validate(&self, num_sources: usize) -> Result<()> {
        let bad = |msg: String| Err(DeptError::InvalidArgument(msg));
        if self.rounds == 0 || self.local_steps == 0 {
            return bad("rounds and local_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if num_sources == 0 {
            return bad("no sources".into());
        }
        let s = self.selected(num_sources);
        if s == 0 || s > num_sources {
            return bad(format!("sources_per_round {s} outside 1..={num_sources}"));
        }
        match (self.variant.is_baseline(), self.tau) {
            (true, Some(t)) if !(t >= 0.0) || !t.is_finite() => return bad(format!("tau {t} must be >= 0")),
            (false, Some(_)) => return bad(format!("tau applies only to STD and ACT, not {}", self.variant)),
            _ => {}
        }
        match (self.variant, self.forget_every) {
            (Variant::Act, None | Some(0)) => return bad("ACT needs forget_every >= 1".into()),
            (v, Some(_)) if v != Variant::Act => return bad(format!("forget_every applies only to ACT, not {v}")),
            _ => {}
        }
        Ok(())
    }
}

/// Inner-optimizer knobs shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub alpha: f64,
    #[serde(default = "default_clip")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

fn default_clip() -> f64 {
    1.0
}

impl TrainHyper {
    pub fn new(peak_lr: f64, alpha: f64) -> Self {
        Self { peak_lr, alpha, max_grad_norm: 1.0, adamw: AdamWConfig::default() }
    }

    /// The run-wide schedule over `total_steps`, with 1% warmup.
    pub fn schedule(&self, total_steps: u64) -> Result<CosineSchedule> {
        CosineSchedule::with_default_warmup(self.peak_lr, self.alpha, total_steps)
    }
}
