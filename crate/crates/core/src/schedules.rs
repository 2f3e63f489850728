//! Discrete variance schedule and the closed-form forward process.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1` so that stepping to index 0
//! recovers the clean sample.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, t_train: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => make_linear_schedule(self.t_train, self.beta_start, self.beta_end),
        }
    }
}

/// β/α/ᾱ/σ² sequences, stored for `t = 1..=T` at index `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_sigmas_sq: Vec<f64>,
}

/// Linearly spaced β from `beta_start` to `beta_end` inclusive.
///
/// A single-step schedule is accepted when both endpoints agree.
pub fn make_linear_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Config("schedule.T_train must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule endpoints must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    if t_train == 1 && beta_start != beta_end {
        return Err(Error::Config("a one-step schedule needs beta_start == beta_end".into()));
    }
    let betas: Vec<f64> = if t_train == 1 {
        vec![beta_start]
    } else {
        (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect()
    };
    Ok(NoiseSchedule::from_betas(betas))
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(!betas.is_empty() && betas.iter().all(|&b| b > 0.0 && b < 1.0), "betas must lie in (0,1)");
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_sigmas_sq = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Self { betas, alphas, alpha_bars, posterior_sigmas_sq }
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_sigmas_sq(&self) -> &[f64] {
        &self.posterior_sigmas_sq
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(Error::InvalidInput(format!("step {t} outside [1, {}]", self.t_train())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t ∈ [0, T]`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn posterior_sigma_sq(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.posterior_sigmas_sq[t - 1])
    }

    /// Step index for a noise strength: `round(t0·T)` with halves rounded up,
    /// clamped to `[1, T]`.
    pub fn step_for_strength(&self, t0: f64) -> Result<usize> {
        if !(t0 > 0.0 && t0 <= 1.0) {
            return Err(Error::Config(format!("noise strength t0 must lie in (0, 1], got {t0}")));
        }
        let raw = (t0 * self.t_train() as f64 + 0.5).floor() as usize;
        Ok(raw.clamp(1, self.t_train()))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_sample<D: Dimension>(
    schedule: &NoiseSchedule,
    x0: &Array<f32, D>,
    t: usize,
    noise: &Array<f32, D>,
) -> Result<Array<f32, D>> {
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::InvalidInput("forward_sample needs t >= 1".into()));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Array::zeros(x0.raw_dim());
    Zip::from(&mut out).and(x0).and(noise).for_each(|o, &x, &e| {
        *o = (a * x as f64 + b * e as f64) as f32;
    });
    Ok(out)
}

/// `σ(t0) = √((1−ᾱ)/ᾱ)` at the step mapped from `t0`.
pub fn guide_noise_sigma(schedule: &NoiseSchedule, t0: f64) -> Result<f64> {
    let step = schedule.step_for_strength(t0)?;
    let ab = schedule.alpha_bar(step)?;
    Ok(((1.0 - ab) / ab).sqrt())
}
