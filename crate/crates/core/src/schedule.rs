//! Forward-process noise schedule.
//!
//! `alpha_bar` is indexed 0..=T with `alpha_bar[0] = 1.0` (the clean-data
//! endpoint used by the final sampling step). Every schedule — including
//! custom beta sequences — must satisfy `alpha_bar[1] > 0.99` and
//! `alpha_bar[T] < 0.05`, checked at construction so downstream code never
//! sees a degenerate schedule.

use framecast_autograd::Arr;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Number of diffusion steps T.
    pub num_steps: usize,
    /// `betas[i]` is the step-(i+1) noise rate; length T.
    pub betas: Vec<f64>,
    /// `alphas[i] = 1 - betas[i]`; length T.
    pub alphas: Vec<f64>,
    /// Cumulative products, length T+1, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if num_steps < 2 {
            return Err(CoreError::invalid("schedule", "need at least 2 steps"));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(CoreError::invalid(
                "schedule",
                format!("need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"),
            ));
        }
        let t = num_steps;
        let betas = (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// Builds from an explicit beta sequence, enforcing the endpoint
    /// invariants that keep the forward process well conditioned.
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.len() < 2 {
            return Err(CoreError::invalid("schedule", "need at least 2 steps"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0 || !b.is_finite()) {
            return Err(CoreError::invalid("schedule", "betas must lie in (0, 1)"));
        }
        let t = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        for (i, &a) in alphas.iter().enumerate() {
            alpha_bar.push(alpha_bar[i] * a);
        }
        if alpha_bar[1] <= 0.99 {
            return Err(CoreError::invalid(
                "schedule",
                format!(
                    "signal must stay near-clean after one step: alpha_bar[1] = {} <= 0.99",
                    alpha_bar[1]
                ),
            ));
        }
        if alpha_bar[t] >= 0.05 {
            return Err(CoreError::invalid(
                "schedule",
                format!(
                    "terminal state must be near-noise: alpha_bar[T] = {} >= 0.05",
                    alpha_bar[t]
                ),
            ));
        }
        Ok(NoiseSchedule {
            num_steps: t,
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn default_schedule() -> NoiseSchedule {
        Self::linear(DEFAULT_NUM_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule satisfies its own invariants")
    }

    /// `alpha_bar[t]`, valid for t in 0..=T.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            CoreError::invalid(
                "alpha_bar_at",
                format!("timestep {t} outside valid range (T = {})", self.num_steps),
            )
        })
    }

    /// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps, t in 1..=T.
    pub fn forward_noise(&self, z0: &Arr, t: usize, eps: &Arr) -> Result<Arr> {
        if t == 0 || t > self.num_steps {
            return Err(CoreError::invalid(
                "forward_noise",
                format!("timestep {t} outside 1..={}", self.num_steps),
            ));
        }
        if z0.shape() != eps.shape() {
            return Err(CoreError::shape(
                "forward_noise",
                format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar[t];
        Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }
}

/// Standard-normal noise tensor drawn from `rng`.
pub fn sample_eps(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    framecast_autograd::init::normal(rng, shape, 1.0)
}
