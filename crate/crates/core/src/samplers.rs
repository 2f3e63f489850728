//! Reverse-process samplers: ancestral DDPM, deterministic DDIM, classifier-free
//! guidance, and guided synthesis from a noised guide image.

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::denoiser::{Condition, Denoiser};
use crate::rng::{component_rng, standard_normal};
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Ancestral sampling over every step, conditional prediction.
    Ddpm,
    /// Deterministic DDIM with the conditional prediction only.
    Ddim,
    /// Deterministic DDIM with the classifier-free guided prediction.
    CfgDdim,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::CfgDdim => "cfg-ddim",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Guidance scale ω.
    pub omega: f64,
    /// Noise strength t₀ ∈ (0, 1].
    pub t0: f64,
    pub sampler_steps: usize,
    pub sampler_kind: SamplerKind,
    /// Set from the run's root seed, never from the section itself.
    #[serde(default, skip_deserializing)]
    pub seed: u64,
    /// Noise the guide as `x₀ + σ(t₀)·z` instead of `√ᾱ·x₀ + √(1−ᾱ)·z`.
    #[serde(default)]
    pub literal_noising: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { omega: 7.5, t0: 0.8, sampler_steps: 30, sampler_kind: SamplerKind::CfgDdim, seed: 0, literal_noising: false }
    }
}

impl SynthesisConfig {
    /// Checks the config against `schedule` and returns the start step `round(t₀·T)`.
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<usize> {
        let start = schedule.step_for_strength(self.t0)?;
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be positive".into()));
        }
        if self.sampler_kind != SamplerKind::Ddpm && self.sampler_steps > start {
            return Err(Error::Config(format!(
                "sampler_steps {} exceeds the start step {start} for t0 = {}",
                self.sampler_steps, self.t0
            )));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config("omega must be finite".into()));
        }
        Ok(start)
    }
}

/// `(1−ω)·ε(x,t,∅) + ω·ε(x,t,y)`, from exactly two denoiser calls.
pub fn cfg_noise<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Array4<f32>,
    steps: &[usize],
    labels: &[Label],
    omega: f64,
) -> Result<Array4<f32>> {
    let null = vec![Condition::Null; labels.len()];
    let conds: Vec<Condition> = labels.iter().map(|&l| l.into()).collect();
    let uncond = model.predict_noise(x_t, steps, &null)?;
    let cond = model.predict_noise(x_t, steps, &conds)?;
    Ok(combine_guidance(&uncond, &cond, omega))
}

pub(crate) fn combine_guidance(uncond: &Array4<f32>, cond: &Array4<f32>, omega: f64) -> Array4<f32> {
    let mut out = Array4::zeros(cond.raw_dim());
    Zip::from(&mut out).and(uncond).and(cond).for_each(|o, &u, &c| {
        *o = ((1.0 - omega) * u as f64 + omega * c as f64) as f32;
    });
    out
}

/// `F_θ = (x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`, the implied clean sample.
fn predicted_x0(x: f64, eps: f64, ab: f64) -> f64 {
    (x - (1.0 - ab).sqrt() * eps) / ab.sqrt()
}

/// Deterministic update `x_{t'} = √ᾱ_{t'}·F_θ + √(1−ᾱ_{t'})·ε` given a noise estimate.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &Array4<f32>,
    eps: &Array4<f32>,
    t: usize,
    t_prev: usize,
) -> Result<Array4<f32>> {
    ddpm_update(schedule, x_t, eps, t, t_prev, 0.0, None)
}

/// General update `√ᾱ_{t'}·F_θ + √(1−ᾱ_{t'}−σ²)·ε + σ·z`.
pub fn ddpm_update(
    schedule: &NoiseSchedule,
    x_t: &Array4<f32>,
    eps: &Array4<f32>,
    t: usize,
    t_prev: usize,
    sigma_sq: f64,
    z: Option<&Array4<f32>>,
) -> Result<Array4<f32>> {
    if t_prev >= t {
        return Err(Error::InvalidInput(format!("reverse step must decrease: {t} -> {t_prev}")));
    }
    if x_t.shape() != eps.shape() || z.is_some_and(|z| z.shape() != x_t.shape()) {
        return Err(Error::Shape("x_t, noise estimate and draw must share a shape".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let mut radicand = 1.0 - ab_prev - sigma_sq;
    if radicand < 0.0 {
        if radicand < -1e-10 {
            return Err(Error::Numerical(format!(
                "negative radicand {radicand} at step {t}; check the schedule"
            )));
        }
        radicand = 0.0;
    }
    let (c_x0, c_eps, sigma) = (ab_prev.sqrt(), radicand.sqrt(), sigma_sq.max(0.0).sqrt());
    let mut out = Array4::zeros(x_t.raw_dim());
    Zip::from(&mut out).and(x_t).and(eps).for_each(|o, &x, &e| {
        let f = predicted_x0(x as f64, e as f64, ab);
        *o = (c_x0 * f + c_eps * e as f64) as f32;
    });
    if let Some(z) = z {
        if sigma > 0.0 {
            Zip::from(&mut out).and(z).for_each(|o, &zv| *o = (*o as f64 + sigma * zv as f64) as f32);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite sample at step {t}")));
    }
    Ok(out)
}

fn noise_estimate<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Array4<f32>,
    t: usize,
    conds: &[Condition],
    omega: Option<f64>,
) -> Result<Array4<f32>> {
    let steps = vec![t; conds.len()];
    match omega {
        Some(w) => {
            let labels = conds
                .iter()
                .map(|c| match c {
                    Condition::Label(l) => Ok(*l),
                    Condition::Null => Err(Error::InvalidInput("guidance needs a class label, got ∅".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            cfg_noise(model, x_t, &steps, &labels, w)
        }
        None => model.predict_noise(x_t, &steps, conds),
    }
}

/// One ancestral step `t → t−1` with the posterior variance σ_t². The draw
/// `z` is ignored at `t = 1`.
pub fn ddpm_step<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    x_t: &Array4<f32>,
    t: usize,
    conds: &[Condition],
    z: &Array4<f32>,
) -> Result<Array4<f32>> {
    let eps = noise_estimate(model, x_t, t, conds, None)?;
    let sigma_sq = schedule.posterior_sigma_sq(t)?;
    let z = (t > 1).then_some(z);
    ddpm_update(schedule, x_t, &eps, t, t - 1, sigma_sq, z)
}

/// One deterministic step `t → t_prev`; with `omega` the estimate comes from
/// [`cfg_noise`].
pub fn ddim_step<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    x_t: &Array4<f32>,
    t: usize,
    t_prev: usize,
    conds: &[Condition],
    omega: Option<f64>,
) -> Result<Array4<f32>> {
    let eps = noise_estimate(model, x_t, t, conds, omega)?;
    ddim_update(schedule, x_t, &eps, t, t_prev)
}

/// `steps + 1` uniformly spaced indices from `start` down to 0 inclusive.
pub fn ddim_timesteps(start: usize, steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| ((start * (steps - i)) as f64 / steps as f64 + 0.5).floor() as usize)
        .collect();
    ts.dedup();
    ts
}

fn run_reverse<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    mut x: Array4<f32>,
    start: usize,
    conds: &[Condition],
    config: &SynthesisConfig,
    step_noise_keys: &[String],
) -> Result<Array4<f32>> {
    match config.sampler_kind {
        SamplerKind::Ddpm => {
            let mut rngs: Vec<_> = step_noise_keys.iter().map(|k| component_rng(config.seed, k)).collect();
            let item_shape = (1, x.shape()[1], x.shape()[2], x.shape()[3]);
            for t in (1..=start).rev() {
                let draws: Vec<Array4<f32>> = rngs.iter_mut().map(|r| standard_normal(item_shape, r)).collect();
                let views: Vec<_> = draws.iter().map(|d| d.index_axis(Axis(0), 0)).collect();
                let z = ndarray::stack(Axis(0), &views).expect("equal shapes");
                x = ddpm_step(schedule, model, &x, t, conds, &z)?;
            }
        }
        SamplerKind::Ddim | SamplerKind::CfgDdim => {
            let omega = (config.sampler_kind == SamplerKind::CfgDdim).then_some(config.omega);
            for pair in ddim_timesteps(start, config.sampler_steps).windows(2) {
                x = ddim_step(schedule, model, &x, pair[0], pair[1], conds, omega)?;
            }
        }
    }
    Ok(x)
}

/// Guided synthesis for a batch: every guide is noised to step `round(t₀·T)`
/// with a draw keyed by `(seed, key)` (shared across labels), then denoised
/// toward its label. Output is clipped to `[-1, 1]`.
pub fn synthesize_batch<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    guides: &Array4<f32>,
    keys: &[String],
    labels: &[Label],
    config: &SynthesisConfig,
) -> Result<Array4<f32>> {
    let start = config.validate(schedule)?;
    let n = guides.shape()[0];
    if keys.len() != n || labels.len() != n {
        return Err(Error::Shape(format!("{n} guides, {} keys, {} labels", keys.len(), labels.len())));
    }
    if guides.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("guide pixels must lie in [-1, 1]".into()));
    }
    let item_shape = (1, guides.shape()[1], guides.shape()[2], guides.shape()[3]);
    let ab = schedule.alpha_bar(start)?;
    let sigma = ((1.0 - ab) / ab).sqrt();
    let mut x = Array4::<f32>::zeros(guides.raw_dim());
    for (i, key) in keys.iter().enumerate() {
        let mut rng = component_rng(config.seed, &format!("guide-noise/{key}"));
        let z = standard_normal(item_shape, &mut rng);
        let mut dst = x.index_axis_mut(Axis(0), i);
        Zip::from(&mut dst).and(&guides.index_axis(Axis(0), i)).and(&z.index_axis(Axis(0), 0)).for_each(
            |o, &g, &zv| {
                let (g, zv) = (g as f64, zv as f64);
                *o = if config.literal_noising {
                    (g + sigma * zv) as f32
                } else {
                    (ab.sqrt() * g + (1.0 - ab).sqrt() * zv) as f32
                };
            },
        );
    }
    let conds: Vec<Condition> = labels.iter().map(|&l| l.into()).collect();
    let step_keys: Vec<String> = keys.iter().zip(labels).map(|(k, l)| format!("ddpm/{k}/{l}")).collect();
    let out = run_reverse(schedule, model, x, start, &conds, config, &step_keys)?;
    Ok(out.mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Guided synthesis of a single guide image toward `label`.
pub fn synthesize_guided<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    guide: &Array3<f32>,
    label: Label,
    config: &SynthesisConfig,
) -> Result<Array3<f32>> {
    let batch = guide.clone().insert_axis(Axis(0));
    let out = synthesize_batch(schedule, model, &batch, &["guide".to_string()], &[label], config)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

/// Syntheses of every guide under every label, as `[label][guide]` batches.
/// Guides are processed `chunk` at a time.
pub fn synthesize_all_labels<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    guides: &[&Array3<f32>],
    keys: &[String],
    config: &SynthesisConfig,
    chunk: usize,
) -> Result<[Vec<Array3<f32>>; 2]> {
    let mut out: [Vec<Array3<f32>>; 2] = Default::default();
    let chunk = chunk.max(1);
    for (gs, ks) in guides.chunks(chunk).zip(keys.chunks(chunk)) {
        let mut imgs = Vec::with_capacity(gs.len() * 2);
        let mut all_keys = Vec::with_capacity(gs.len() * 2);
        let mut labels = Vec::with_capacity(gs.len() * 2);
        for label in Label::ALL {
            imgs.extend(gs.iter().copied());
            all_keys.extend(ks.iter().cloned());
            labels.extend(std::iter::repeat_n(label, gs.len()));
        }
        let batch = crate::data::stack_images(imgs)?;
        let res = synthesize_batch(schedule, model, &batch, &all_keys, &labels, config)?;
        for (i, img) in res.axis_iter(Axis(0)).enumerate() {
            out[labels[i].index()].push(img.to_owned());
        }
    }
    Ok(out)
}

/// Unguided generation from pure noise at step T, deterministic DDIM with
/// `steps` uniformly spaced steps.
pub fn ddim_sample_from_noise<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    model: &D,
    shape: (usize, usize, usize, usize),
    conds: &[Condition],
    steps: usize,
    omega: Option<f64>,
    seed: u64,
) -> Result<Array4<f32>> {
    if conds.len() != shape.0 {
        return Err(Error::Shape(format!("{} conditions for {} samples", conds.len(), shape.0)));
    }
    let t_max = schedule.t_train();
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("steps must lie in [1, {t_max}]")));
    }
    let mut rng = component_rng(seed, "ddim-prior");
    let mut x = standard_normal(shape, &mut rng);
    for pair in ddim_timesteps(t_max, steps).windows(2) {
        x = ddim_step(schedule, model, &x, pair[0], pair[1], conds, omega)?;
    }
    Ok(x)
}
