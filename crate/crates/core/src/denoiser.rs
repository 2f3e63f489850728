//! The conditional noise predictor ε_θ(x_t, t, y) and its implementations.

use condiff_nn::layers::{Conv2d, Embedding, GroupNorm, Linear};
use condiff_nn::{ParamStore, Scalar, Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

/// Conditioning input: a class label or the null token ∅.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Label(Label),
    Null,
}

impl Condition {
    /// Rows of the label embedding table: y₁, y₂, ∅.
    pub const VOCABULARY_SIZE: usize = 3;

    pub fn row(self) -> usize {
        match self {
            Condition::Label(l) => l.index(),
            Condition::Null => 2,
        }
    }

    pub fn from_row(row: usize) -> Result<Self> {
        match row {
            0 | 1 => Ok(Condition::Label(Label::from_index(row).unwrap())),
            2 => Ok(Condition::Null),
            other => Err(Error::InvalidInput(format!("condition {other} outside vocabulary {{0, 1, 2}}"))),
        }
    }
}

impl From<Label> for Condition {
    fn from(l: Label) -> Self {
        Condition::Label(l)
    }
}

/// Inference-time view of a noise predictor. Implementations must be
/// deterministic: identical inputs give bitwise-identical outputs.
pub trait Denoiser {
    /// Number of training diffusion steps the model accepts.
    fn t_train(&self) -> usize;

    /// Predicts the injected noise for an NHWC batch. `steps` and `conds` hold
    /// one entry per batch item; steps are 1-based.
    fn predict_noise(&self, x_t: &Array4<f32>, steps: &[usize], conds: &[Condition]) -> Result<Array4<f32>>;
}

pub(crate) fn check_inputs(x_t: &Array4<f32>, steps: &[usize], conds: &[Condition], t_train: usize) -> Result<()> {
    let n = x_t.shape()[0];
    if steps.len() != n || conds.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} images with {} steps and {} conditions",
            steps.len(),
            conds.len()
        )));
    }
    if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > t_train) {
        return Err(Error::InvalidInput(format!("step {t} outside [1, {t_train}]")));
    }
    Ok(())
}

/// A denoiser that can be differentiated on a tape, for training.
pub trait TrainableDenoiser<F: Scalar> {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
    /// Records ε_θ on `tape` using `params` (which share the layout of [`Self::params`]).
    fn forward(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        x_t: Var,
        steps: &[usize],
        conds: &[Condition],
    ) -> Var;
}

/// Closed-form optimal noise predictor for Gaussian data `x₀ ~ N(μ, v·I)`:
/// `ε* = (x_t − √ᾱ_t·E[x₀|x_t]) / √(1−ᾱ_t)`. Ignores the condition.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mean: f64,
    pub variance: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: f64, variance: f64, schedule: NoiseSchedule) -> Self {
        assert!(variance > 0.0);
        Self { mean, variance, schedule }
    }

    /// `E[x₀ | x_t]` for a single pixel value.
    pub fn posterior_mean(&self, x_t: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bars()[t - 1];
        let gain = ab.sqrt() * self.variance / (ab * self.variance + 1.0 - ab);
        self.mean + gain * (x_t - ab.sqrt() * self.mean)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn t_train(&self) -> usize {
        self.schedule.t_train()
    }

    fn predict_noise(&self, x_t: &Array4<f32>, steps: &[usize], conds: &[Condition]) -> Result<Array4<f32>> {
        check_inputs(x_t, steps, conds, self.t_train())?;
        let mut out = Array4::zeros(x_t.raw_dim());
        for (i, &t) in steps.iter().enumerate() {
            let ab = self.schedule.alpha_bars()[t - 1];
            let mut o = out.index_axis_mut(ndarray::Axis(0), i);
            Zip::from(&mut o).and(&x_t.index_axis(ndarray::Axis(0), i)).for_each(|o, &x| {
                let x = x as f64;
                let x0 = self.posterior_mean(x, t);
                *o = ((x - ab.sqrt() * x0) / (1.0 - ab).sqrt()) as f32;
            });
        }
        Ok(out)
    }
}

/// Architecture hyper-parameters of the reference U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel widths of the three resolution levels.
    pub channels: [usize; 3],
    pub image_channels: usize,
    pub resolution: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], image_channels: 3, resolution: 32 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0 || c % 2 != 0) {
            return Err(Error::Config(format!("U-Net widths must be positive and even, got {:?}", self.channels)));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(4) {
            return Err(Error::Config(format!("resolution must be a positive multiple of 4, got {}", self.resolution)));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        self.channels[0] * 4
    }
}

pub(crate) fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c.is_multiple_of(*g)).unwrap()
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, groups_for(c_in)),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            emb_proj: Linear::new(store, &format!("{name}.emb"), emb_dim, c_out, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups_for(c_out)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, rng)),
        }
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(tape, p, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h);
        let e = self.emb_proj.forward(tape, p, emb);
        let h = tape.add_channel(h, e);
        let h = self.norm2.forward(tape, p, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, p, x),
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Three-level pixel-space U-Net. The label embedding (rows y₁, y₂, ∅) is
/// added to the sinusoidal timestep embedding and injected into every
/// residual block.
#[derive(Debug, Clone)]
pub struct ConditionalUNet<F = f32> {
    pub config: UNetConfig,
    t_train: usize,
    params: ParamStore<F>,
    time1: Linear,
    time2: Linear,
    labels: Embedding,
    conv_in: Conv2d,
    down1: ResBlock,
    down2: ResBlock,
    down3: ResBlock,
    mid: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Sinusoidal embedding of (1-based) step indices, `(N, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((steps.len(), dim), |(i, j)| {
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = steps[i] as f64 * freq;
        if j < half { arg.sin() } else { arg.cos() }
    })
}

impl<F: Scalar> ConditionalUNet<F> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, t_train: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let td = config.time_dim();
        let time1 = Linear::new(&mut s, "time.fc1", c1, td, rng);
        let time2 = Linear::new(&mut s, "time.fc2", td, td, rng);
        let labels = Embedding::new(&mut s, "label", Condition::VOCABULARY_SIZE, td, rng);
        let conv_in = Conv2d::new(&mut s, "conv_in", config.image_channels, c1, 3, rng);
        let down1 = ResBlock::new(&mut s, "down1", c1, c1, td, rng);
        let down2 = ResBlock::new(&mut s, "down2", c1, c2, td, rng);
        let down3 = ResBlock::new(&mut s, "down3", c2, c3, td, rng);
        let mid = ResBlock::new(&mut s, "mid", c3, c3, td, rng);
        let up2 = ResBlock::new(&mut s, "up2", c3 + c2, c2, td, rng);
        let up1 = ResBlock::new(&mut s, "up1", c2 + c1, c1, td, rng);
        let norm_out = GroupNorm::new(&mut s, "norm_out", c1, groups_for(c1));
        let conv_out = Conv2d::zeroed(&mut s, "conv_out", c1, config.image_channels, 3);
        Ok(Self {
            config,
            t_train,
            params: s,
            time1,
            time2,
            labels,
            conv_in,
            down1,
            down2,
            down3,
            mid,
            up2,
            up1,
            norm_out,
            conv_out,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Evaluates with an explicit parameter set (e.g. EMA weights).
    pub fn predict_with(
        &self,
        params: &ParamStore<F>,
        x_t: &Array4<f32>,
        steps: &[usize],
        conds: &[Condition],
    ) -> Result<Array4<f32>> {
        check_inputs(x_t, steps, conds, self.t_train)?;
        if x_t.shape()[3] != self.config.image_channels {
            return Err(Error::Shape(format!(
                "expected {} channels, got {}",
                self.config.image_channels,
                x_t.shape()[3]
            )));
        }
        let (h, w) = (x_t.shape()[1], x_t.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} must be a multiple of 4")));
        }
        let mut tape = Tape::new();
        let x = tape.constant(x_t.mapv(|v| F::from_f64_lossy(v as f64)).into_dyn());
        let out = self.forward(&mut tape, params, x, steps, conds);
        let y: ArrayD<f32> = tape.value(out).mapv(|v| v.to_f64_lossy() as f32);
        let y = y.into_dimensionality::<ndarray::Ix4>().map_err(|e| Error::Shape(e.to_string()))?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("denoiser produced a non-finite value".into()));
        }
        Ok(y)
    }
}

impl<F: Scalar> TrainableDenoiser<F> for ConditionalUNet<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var, steps: &[usize], conds: &[Condition]) -> Var {
        let temb = timestep_embedding(steps, self.config.channels[0]).mapv(F::from_f64_lossy);
        let temb = tape.constant(temb.into_dyn());
        let e = self.time1.forward(tape, p, temb);
        let e = tape.silu(e);
        let e = self.time2.forward(tape, p, e);
        let rows: Vec<usize> = conds.iter().map(|c| c.row()).collect();
        let lab = self.labels.forward(tape, p, &rows);
        let emb = tape.add(e, lab);
        let emb = tape.silu(emb);

        let h = self.conv_in.forward(tape, p, x);
        let s1 = self.down1.forward(tape, p, h, emb);
        let h = tape.avg_pool2(s1);
        let s2 = self.down2.forward(tape, p, h, emb);
        let h = tape.avg_pool2(s2);
        let h = self.down3.forward(tape, p, h, emb);
        let h = self.mid.forward(tape, p, h, emb);
        let h = tape.upsample2(h);
        let h = tape.concat_channels(h, s2);
        let h = self.up2.forward(tape, p, h, emb);
        let h = tape.upsample2(h);
        let h = tape.concat_channels(h, s1);
        let h = self.up1.forward(tape, p, h, emb);
        let h = self.norm_out.forward(tape, p, h);
        let h = tape.silu(h);
        self.conv_out.forward(tape, p, h)
    }
}

/// A trained U-Net bundled with the weights used for sampling.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub net: ConditionalUNet<f32>,
    /// Weights used at inference; the EMA shadow after training.
    pub sampling_params: ParamStore<f32>,
}

impl DiffusionModel {
    pub fn new(net: ConditionalUNet<f32>) -> Self {
        let sampling_params = net.params().clone();
        Self { net, sampling_params }
    }
}

impl Denoiser for DiffusionModel {
    fn t_train(&self) -> usize {
        self.net.t_train()
    }

    fn predict_noise(&self, x_t: &Array4<f32>, steps: &[usize], conds: &[Condition]) -> Result<Array4<f32>> {
        self.net.predict_with(&self.sampling_params, x_t, steps, conds)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn t_train(&self) -> usize {
        (**self).t_train()
    }

    fn predict_noise(&self, x_t: &Array4<f32>, steps: &[usize], conds: &[Condition]) -> Result<Array4<f32>> {
        (**self).predict_noise(x_t, steps, conds)
    }
}
