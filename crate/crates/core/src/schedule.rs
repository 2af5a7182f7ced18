//! Learning-rate schedule: linear warmup, then cosine decay.

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: usize,
    pub total: usize,
    /// Restart the cosine every this many post-warmup steps. `None` is a
    /// single cycle ending at `total`.
    #[serde(default)]
    pub restart_period: Option<usize>,
}

impl Schedule {
    /// Warmup set to 5% of the run.
    pub fn with_default_warmup(lr: f64, total: usize) -> Self {
        Self { lr, warmup: total / 20, total, restart_period: None }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step, self)
    }
}

pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup {
        return s.lr * step as f64 / s.warmup as f64;
    }
    let decay = s.total.saturating_sub(s.warmup).max(1);
    let (pos, len) = match s.restart_period {
        Some(p) if p > 0 => ((step - s.warmup) % p, p),
        _ => ((step - s.warmup).min(decay), decay),
    };
    0.5 * s.lr * (1.0 + (core::f64::consts::PI * pos as f64 / len as f64).cos())
}
