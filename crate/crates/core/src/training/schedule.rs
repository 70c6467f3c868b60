use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `target_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub target_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

    pub fn new(target_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        let s = Schedule {
            target_lr,
            total_steps,
            warmup_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.target_lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is negative", self.target_lr)));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// Learning rate at a (possibly fractional) step, clamped to `[0, total_steps]`.
pub fn lr_at(step: f64, s: &Schedule) -> f64 {
    let total = s.total_steps as f64;
    let t = step.clamp(0.0, total);
    let w = s.warmup_steps();
    let lr = if t < w {
        s.target_lr * t / w
    } else {
        let progress = (t - w) / (total - w);
        s.target_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    };
    lr.max(0.0)
}

/// Learning-rate policy for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    WarmupCosine { target_lr: f64, warmup_fraction: f64 },
    Constant { lr: f64 },
}

impl LrPolicy {
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        match *self {
            LrPolicy::Constant { lr } => Ok(lr),
            LrPolicy::WarmupCosine {
                target_lr,
                warmup_fraction,
            } => Ok(lr_at(step as f64, &Schedule::new(target_lr, total_steps, warmup_fraction)?)),
        }
    }
}
