//! Per-step learning-rate schedule: linear warmup to the peak rate,
//! then cosine decay to zero over the remaining steps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps} steps) exceeds the schedule ({total_steps} steps)"
            )));
        }
        if !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak lr must be >= 0, got {peak_lr}")));
        }
        Ok(LrSchedule {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// The conventional peak: 0.06 × batch/256, scaled per-step.
    pub fn pretrain(
        batch_size: usize,
        base_lr: Option<f64>,
        warmup_epochs: usize,
        epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        let peak = base_lr.unwrap_or(0.06 * batch_size as f64 / 256.0);
        LrSchedule::new(
            peak,
            (warmup_epochs * steps_per_epoch) as u64,
            (epochs * steps_per_epoch) as u64,
        )
    }

    #[must_use]
    pub fn peak(&self) -> f64 {
        self.peak_lr
    }

    /// Learning rate applied at `step` (0-based). During warmup the rate
    /// ramps as (step+1)/warmup_steps × peak, reaching the peak exactly on
    /// the last warmup step; afterwards it follows
    /// peak × ½(1 + cos(π · progress)) with progress spanning the
    /// remaining steps.
    #[must_use]
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps.saturating_sub(1));
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span <= 0.0 {
            return self.peak_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Piecewise-constant schedule: the rate is multiplied by `factor` at
/// each milestone epoch (used by the frozen-backbone classifier phase).
#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneSchedule {
    base_lr: f64,
    milestones: Vec<usize>,
    factor: f64,
}

impl MilestoneSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factor: f64, epochs: usize) -> Result<Self> {
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        if milestones.iter().any(|&m| m >= epochs) {
            return Err(Error::Config(format!(
                "milestones {milestones:?} must lie below the epoch count {epochs}"
            )));
        }
        if !(base_lr.is_finite() && base_lr >= 0.0 && factor > 0.0) {
            return Err(Error::Config("invalid milestone schedule constants".into()));
        }
        Ok(MilestoneSchedule {
            base_lr,
            milestones,
            factor,
        })
    }

    #[must_use]
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}
