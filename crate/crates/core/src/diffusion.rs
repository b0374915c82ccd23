//! Discrete DDPM machinery: schedules, forward noising, Tweedie denoising and
//! the ancestral reverse step.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `t = 0` meaning "clean". Scores
//! are exchanged as `∇ log p`; an ε-prediction network converts via
//! `ε = −√(1−ᾱ_t) · score`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{Rng, Signal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Contract("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Contract(format!("beta must lie in (0, 1), got {b}")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// The standard DDPM range rescaled to `steps`: β from `0.1/T` to `20/T`,
    /// which is 1e-4..0.02 at `T = 1000` and keeps `ᾱ_T` near zero for small `T`.
    pub fn ddpm_default(steps: usize) -> Result<Self> {
        let t = steps as f64;
        make_linear_schedule(steps, 0.1 / t, (20.0 / t).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linearly spaced betas over `steps` timesteps.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Contract(format!(
            "invalid schedule: T={steps}, beta_start={beta_start}, beta_end={beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + step * i as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_t: Signal,
    pub t: usize,
}

/// Samples `q(x_t | x_0)`: `√ᾱ_t x₀ + √(1−ᾱ_t) ε`.
pub fn forward_noise(
    sched: &NoiseSchedule,
    x0: &Signal,
    t: usize,
    rng: &mut Rng,
) -> Result<Signal> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.with_data(
        x0.as_slice()
            .iter()
            .map(|v| a * v + b * rng.normal())
            .collect(),
    )
}

/// Posterior mean `E[x₀ | x_t] = (x_t + (1−ᾱ_t)·score) / √ᾱ_t`.
pub fn tweedie_denoise(
    sched: &NoiseSchedule,
    state: &DiffusionState,
    prior_score: &Signal,
) -> Result<Signal> {
    check_len("tweedie_denoise", state.x_t.len(), prior_score.len())?;
    let ab = sched.alpha_bar(state.t)?;
    if ab <= 0.0 {
        return Err(Error::Contract(
            "alpha_bar is zero; x0 is unidentifiable".into(),
        ));
    }
    let inv = 1.0 / ab.sqrt();
    state.x_t.with_data(
        state
            .x_t
            .as_slice()
            .iter()
            .zip(prior_score.as_slice())
            .map(|(x, s)| (x + (1.0 - ab) * s) * inv)
            .collect(),
    )
}

/// One ancestral step with the large DDPM variance `σ_t² = β_t`:
/// `x_{t−1} = (x_t + β_t·score)/√(1−β_t) + √β_t·ε`, noise-free at `t = 1`.
pub fn reverse_step(
    sched: &NoiseSchedule,
    state: &DiffusionState,
    posterior_score: &Signal,
    rng: &mut Rng,
) -> Result<DiffusionState> {
    check_len("reverse_step", state.x_t.len(), posterior_score.len())?;
    let beta = sched.beta(state.t)?;
    let inv = 1.0 / (1.0 - beta).sqrt();
    let noise_std = if state.t > 1 { beta.sqrt() } else { 0.0 };
    let data = state
        .x_t
        .as_slice()
        .iter()
        .zip(posterior_score.as_slice())
        .map(|(x, s)| {
            let mean = (x + beta * s) * inv;
            if noise_std > 0.0 {
                mean + noise_std * rng.normal()
            } else {
                mean
            }
        })
        .collect();
    Ok(DiffusionState {
        x_t: state.x_t.with_data(data)?,
        t: state.t - 1,
    })
}
