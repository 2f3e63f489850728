//! Joint conditional/unconditional denoiser training by random label dropout.

use condiff_nn::{AdamW, Ema, Gradients, ParamStore, Scalar, Tape};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, ImageRecord, Label};
use crate::denoiser::{Condition, TrainableDenoiser};
use crate::rng::{component_rng, standard_normal};
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    /// Probability of replacing a label with ∅.
    pub p_uncond: f64,
    /// Optimizer steps N.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Set from the run's root seed, never from the section itself.
    #[serde(default, skip_deserializing)]
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.15,
            steps: 10_000,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Random inputs of one loss evaluation: a step, a noise draw and a
/// (possibly dropped) condition per batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    pub steps: Vec<usize>,
    pub conds: Vec<Condition>,
    pub noise: Array4<f32>,
}

impl LossDraw {
    pub fn sample<R: Rng>(
        schedule: &NoiseSchedule,
        labels: &[Label],
        p_uncond: f64,
        shape: (usize, usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let steps = labels.iter().map(|_| rng.random_range(1..=schedule.t_train())).collect();
        let conds = labels
            .iter()
            .map(|&l| if rng.random::<f64>() < p_uncond { Condition::Null } else { l.into() })
            .collect();
        let mut noise = Array4::zeros(shape);
        noise.iter_mut().for_each(|v| *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng));
        Self { steps, conds, noise }
    }
}

/// Records `mean((ε − ε_θ(x_t, t, y))²)` for fixed draws and returns the
/// loss value with parameter gradients.
pub fn loss_with_draw<F: Scalar, M: TrainableDenoiser<F>>(
    schedule: &NoiseSchedule,
    model: &M,
    params: &ParamStore<F>,
    images: &Array4<f32>,
    draw: &LossDraw,
) -> Result<(f64, Gradients<F>)> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::InvalidInput("diffusion loss needs a non-empty batch".into()));
    }
    if draw.noise.shape() != images.shape() || draw.steps.len() != n || draw.conds.len() != n {
        return Err(Error::Shape("loss draw does not match the batch".into()));
    }
    let mut x_t = ndarray::ArrayD::<F>::zeros(images.shape());
    for (i, &t) in draw.steps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut dst = x_t.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut dst)
            .and(&images.index_axis(Axis(0), i).into_dyn())
            .and(&draw.noise.index_axis(Axis(0), i).into_dyn())
            .for_each(|o, &x, &e| *o = F::from_f64_lossy(a * x as f64 + b * e as f64));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_t);
    let pred = model.forward(&mut tape, params, x, &draw.steps, &draw.conds);
    let target = draw.noise.mapv(|v| F::from_f64_lossy(v as f64)).into_dyn();
    let loss = tape.mse(pred, target);
    let value = tape.value(loss).iter().next().map(|v| v.to_f64_lossy()).unwrap_or(f64::NAN);
    Ok((value, tape.backward(loss)))
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and label dropout, then evaluates the
/// loss and gradients.
pub fn diffusion_loss<F: Scalar, M: TrainableDenoiser<F>, R: Rng>(
    schedule: &NoiseSchedule,
    model: &M,
    images: &Array4<f32>,
    labels: &[Label],
    p_uncond: f64,
    rng: &mut R,
) -> Result<(f64, Gradients<F>)> {
    if labels.len() != images.shape()[0] {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), images.shape()[0])));
    }
    let d = images.shape();
    let draw = LossDraw::sample(schedule, labels, p_uncond, (d[0], d[1], d[2], d[3]), rng);
    loss_with_draw(schedule, model, model.params(), images, &draw)
}

/// Result of [`train_diffusion`].
#[derive(Debug, Clone)]
pub struct DiffusionTrainOutcome<F> {
    /// Per-step batch loss.
    pub loss_trace: Vec<f64>,
    /// EMA weights used for sampling.
    pub ema: ParamStore<F>,
}

/// Shuffled-epoch batch sampler over record indices.
pub(crate) struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                self.reshuffle_if_done();
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Runs `config.steps` AdamW steps on `model`. `on_checkpoint(step, params,
/// ema)` is called every `checkpoint_every` steps. A non-finite loss aborts
/// with the offending step's state in the error message.
pub fn train_diffusion<F, M, C>(
    schedule: &NoiseSchedule,
    model: &mut M,
    dataset: &[ImageRecord],
    config: &DiffusionTrainConfig,
    mut on_checkpoint: C,
) -> Result<DiffusionTrainOutcome<F>>
where
    F: Scalar,
    M: TrainableDenoiser<F>,
    C: FnMut(usize, &ParamStore<F>, &ParamStore<F>) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let images = stack_images(dataset.iter().map(|r| &r.image))?;
    let labels: Vec<Label> = dataset.iter().map(|r| r.label).collect();
    let mut order = BatchOrder::new(dataset.len(), component_rng(config.seed, "diffusion/order"));
    let mut rng = component_rng(config.seed, "diffusion/draws");
    let mut opt = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let mut ema = Ema::new(model.params(), config.ema_decay);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx = order.next_batch(config.batch_size);
        let batch = images.select(Axis(0), &idx);
        let batch_labels: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = diffusion_loss(schedule, &*model, &batch, &batch_labels, config.p_uncond, &mut rng)?;
        if !loss.is_finite() {
            let ids: Vec<&str> = idx.iter().map(|&i| dataset[i].id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite diffusion loss {loss} at step {step}; batch records {ids:?}; last finite losses {:?}",
                &trace[trace.len().saturating_sub(5)..]
            )));
        }
        trace.push(loss);
        opt.step(model.params_mut(), &grads.params());
        ema.update(model.params());
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, model.params(), &ema.shadow)?;
        }
        if step % 100 == 0 {
            log::info!("diffusion step {step}/{}: loss {loss:.5}", config.steps);
        }
    }
    Ok(DiffusionTrainOutcome { loss_trace: trace, ema: ema.shadow })
}

/// Deterministic standard-normal noise of a given shape, for fixed-draw tests
/// and evaluations.
pub fn fixed_noise(seed: u64, key: &str, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    standard_normal(shape, &mut component_rng(seed, key))
}
