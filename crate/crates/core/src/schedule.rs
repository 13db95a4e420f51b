//! Linear-beta noise schedule and the closed-form forward process.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::LatentGrid;

/// Betas, alphas and cumulative products, indexed by step `t` in `1..=T`
/// (stored at `t - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::Step { t, steps: self.steps() });
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(CoreError::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(from_betas(betas))
}

/// Builds a schedule from explicit betas (used for hand-checked schedules).
pub fn from_betas(betas: Vec<f64>) -> NoiseSchedule {
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(alphas.len());
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    NoiseSchedule { betas, alphas, alpha_bars }
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse<S: Scalar>(z0: &LatentGrid<S>, t: usize, eps: &LatentGrid<S>, schedule: &NoiseSchedule) -> Result<LatentGrid<S>> {
    schedule.check_step(t)?;
    if z0.shape != eps.shape {
        return Err(CoreError::Shape("noise and signal grids differ".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (S::c(ab.sqrt()), S::c((1.0 - ab).sqrt()));
    let data = z0.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + b * e).collect();
    Ok(LatentGrid { shape: z0.shape, data })
}
