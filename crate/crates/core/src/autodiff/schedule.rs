use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    StepDecay,
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f32,
    pub total_epochs: usize,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f32,
}

fn default_decay() -> f32 {
    0.1
}

impl LrSchedule {
    pub fn cosine(base_lr: f32, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            total_epochs,
            milestones: Vec::new(),
            decay_factor: default_decay(),
        }
    }

    pub fn step_decay(base_lr: f32, milestones: Vec<usize>, decay_factor: f32) -> Self {
        Self {
            kind: ScheduleKind::StepDecay,
            base_lr,
            total_epochs: 0,
            milestones,
            decay_factor,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("{field}.lr"), "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("{field}.decay_factor"), "must lie in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("{field}.milestones"), "must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.kind {
            ScheduleKind::Cosine => {
                if self.total_epochs == 0 {
                    return self.base_lr;
                }
                let t = epoch.min(self.total_epochs) as f64 / self.total_epochs as f64;
                (f64::from(self.base_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
            ScheduleKind::StepDecay => {
                let passed = self.milestones.iter().filter(|m| epoch >= **m).count();
                self.base_lr * self.decay_factor.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_starts_at_base_and_decays() {
        let s = LrSchedule::cosine(3.5e-4, 30);
        assert_eq!(s.lr_at(0), 3.5e-4);
        assert!((s.lr_at(15) - 1.75e-4).abs() < 1e-9);
        assert!(s.lr_at(30).abs() < 1e-12);
        for e in 0..30 {
            assert!(s.lr_at(e + 1) <= s.lr_at(e));
        }
    }

    #[test]
    fn step_decay_multiplies_at_milestones() {
        let s = LrSchedule::step_decay(1.0, vec![10, 18], 0.1);
        assert_eq!(s.lr_at(9), 1.0);
        assert!((s.lr_at(10) - 0.1).abs() < 1e-7);
        assert!((s.lr_at(17) - 0.1).abs() < 1e-7);
        assert!((s.lr_at(18) - 0.01).abs() < 1e-8);
    }
}
