//! Linear noise schedule and the closed-form forward/reverse step algebra.

use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::body::{PARAM_DIM, SEGMENTS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling visits `T, T − stride, …, stride`.
    pub stride: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 5e-6, beta_end: 5e-3, stride: 1 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.steps == 0 {
            return Err(DiffusionError::Config("steps must be at least 1".into()));
        }
        if self.stride == 0 || !self.steps.is_multiple_of(self.stride) {
            return Err(DiffusionError::Config(format!(
                "stride {} must divide steps {}",
                self.stride, self.steps
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        self.validate()?;
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    /// Sampling time steps from `T` down to `stride`.
    pub fn timesteps(&self) -> Vec<usize> {
        (1..=self.steps / self.stride).rev().map(|k| k * self.stride).collect()
    }
}

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{i≤t} α_i` for `t = 1..=T`, with
/// `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β` interpolated linearly from `beta_start` at `t = 1` to `beta_end` at
    /// `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Config(format!(
                "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, {beta_start}..{beta_end}"
            )));
        }
        let mut betas = vec![0.0; steps + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            *b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            };
        }
        Ok(Self::from_betas(betas))
    }

    /// `betas[0]` is ignored (it stands for the clean step).
    fn from_betas(mut betas: Vec<f64>) -> Self {
        betas[0] = 0.0;
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; betas.len()];
        for t in 1..betas.len() {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Self { betas, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check_t(t)?;
        check_same(x0.len(), eps.len())?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// `x̃0 = (x_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check_t(t)?;
        check_same(x_t.len(), eps_hat.len())?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect())
    }

    /// Deterministic DDIM update from `t` to `t − 1`.
    pub fn ddim_step(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>, DiffusionError> {
        self.ddim_step_to(x_t, x0_hat, t, t.saturating_sub(1))
    }

    /// Deterministic DDIM update from `t` to any earlier `to`:
    /// `x_to = √ᾱ_to·x̂0 + √(1 − ᾱ_to)/√(1 − ᾱ_t)·(x_t − √ᾱ_t·x̂0)`.
    pub fn ddim_step_to(&self, x_t: &[f64], x0_hat: &[f64], t: usize, to: usize) -> Result<Vec<f64>, DiffusionError> {
        self.check_t(t)?;
        check_same(x_t.len(), x0_hat.len())?;
        if to >= t {
            return Err(DiffusionError::Timestep { t: to, steps: t - 1 });
        }
        let (ab_t, ab_to) = (self.alpha_bar(t), self.alpha_bar(to));
        let ratio = (1.0 - ab_to).sqrt() / (1.0 - ab_t).sqrt();
        let (a_t, a_to) = (ab_t.sqrt(), ab_to.sqrt());
        Ok(x_t.iter().zip(x0_hat).map(|(x, x0)| a_to * x0 + ratio * (x - a_t * x0)).collect())
    }
}

fn check_same(a: usize, b: usize) -> Result<(), DiffusionError> {
    if a != b {
        return Err(DiffusionError::Dimension { expected: a, got: b });
    }
    Ok(())
}

/// Sum over the four parameter segments of each segment's mean squared error.
pub fn training_loss(eps_hat: &[f64], eps: &[f64]) -> Result<f64, DiffusionError> {
    for v in [eps_hat, eps] {
        check_same(PARAM_DIM, v.len())?;
    }
    Ok(SEGMENTS
        .iter()
        .map(|r| {
            let n = r.len() as f64;
            r.clone().map(|i| (eps_hat[i] - eps[i]).powi(2)).sum::<f64>() / n
        })
        .sum())
}
