//! Metric-learning stage: an embedding network trained with a triplet loss
//! over real and synthetic images, and the minimum-distance label decision.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use condiff_nn::layers::{Conv2d, GroupNorm, Linear};
use condiff_nn::{AdamW, ParamStore, Scalar, Tape, Var};
use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, sanitize, save_image, stack_images, ImageRecord, Label};
use crate::denoiser::{groups_for, Denoiser};
use crate::metrics::FeatureExtractor;
use crate::output::{csv_reader, write_csv};
use crate::rng::component_rng;
use crate::samplers::{synthesize_all_labels, SynthesisConfig};
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

/// Descriptor of the encoder architecture, recorded in checkpoints.
pub const BACKBONE: &str = "conv3x3-groupnorm-silu, 3 stages, global average pool, linear head";

/// Names of the layers whose activations can be inspected.
pub const LAYERS: [&str; 3] = ["stage1", "stage2", "stage3"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Channel widths of the three encoder stages.
    pub channels: [usize; 3],
    /// Embedding dimension d.
    pub dim: usize,
    pub image_channels: usize,
    pub resolution: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], dim: 256, image_channels: 3, resolution: 32 }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.dim == 0 {
            return Err(Error::Config(format!(
                "embedding widths and dimension must be positive, got {:?} and {}",
                self.channels, self.dim
            )));
        }
        if self.resolution < 4 || !self.resolution.is_multiple_of(4) {
            return Err(Error::Config(format!("resolution must be a positive multiple of 4, got {}", self.resolution)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvUnit {
    fn new<F: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(s, &format!("{name}.conv"), c_in, c_out, 3, rng),
            norm: GroupNorm::new(s, &format!("{name}.norm"), c_out, groups_for(c_out)),
        }
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Var {
        let h = self.conv.forward(tape, p, x);
        let h = self.norm.forward(tape, p, h);
        tape.silu(h)
    }
}

/// The embedding network f_φ: images to unit-norm d-vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingNet<F = f32> {
    pub config: EmbeddingConfig,
    params: ParamStore<F>,
    stage1: [ConvUnit; 2],
    stage2: [ConvUnit; 2],
    stage3: ConvUnit,
    head: Linear,
}

/// Per-stage activations of one forward pass.
struct Trace {
    stages: [Var; 3],
    embedding: Var,
}

impl<F: Scalar> EmbeddingNet<F> {
    pub fn new<R: Rng + ?Sized>(config: EmbeddingConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let stage1 = [
            ConvUnit::new(&mut s, "stage1.0", config.image_channels, c1, rng),
            ConvUnit::new(&mut s, "stage1.1", c1, c1, rng),
        ];
        let stage2 = [ConvUnit::new(&mut s, "stage2.0", c1, c2, rng), ConvUnit::new(&mut s, "stage2.1", c2, c2, rng)];
        let stage3 = ConvUnit::new(&mut s, "stage3.0", c2, c3, rng);
        let head = Linear::new(&mut s, "head", c3, config.dim, rng);
        Ok(Self { config, params: s, stage1, stage2, stage3, head })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn trace(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Trace {
        let h = self.stage1[0].forward(tape, p, x);
        let s1 = self.stage1[1].forward(tape, p, h);
        let h = tape.avg_pool2(s1);
        let h = self.stage2[0].forward(tape, p, h);
        let s2 = self.stage2[1].forward(tape, p, h);
        let h = tape.avg_pool2(s2);
        let s3 = self.stage3.forward(tape, p, h);
        let pooled = tape.global_avg_pool(s3);
        let z = self.head.forward(tape, p, pooled);
        Trace { stages: [s1, s2, s3], embedding: tape.l2_normalize(z) }
    }

    /// Records f_φ(x) on `tape`; the result has shape `(N, d)`.
    pub fn forward(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Var {
        self.trace(tape, p, x).embedding
    }

    fn check_images(&self, images: &Array4<f32>) -> Result<()> {
        let sh = images.shape();
        if sh[3] != self.config.image_channels || !sh[1].is_multiple_of(4) || !sh[2].is_multiple_of(4) || sh[1] == 0 || sh[2] == 0 {
            return Err(Error::Shape(format!(
                "embedding network expects (N, H, W, {}) with H and W multiples of 4, got {sh:?}",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    fn input(tape: &mut Tape<F>, images: &Array4<f32>) -> Var {
        tape.constant(images.mapv(|v| F::from_f64_lossy(v as f64)).into_dyn())
    }

    /// Embeds a batch with explicit parameters.
    pub fn embed_with(&self, params: &ParamStore<F>, images: &Array4<f32>) -> Result<Array2<f64>> {
        self.check_images(images)?;
        let mut out = Array2::zeros((images.shape()[0], self.config.dim));
        const CHUNK: usize = 64;
        for (i, chunk) in images.axis_chunks_iter(Axis(0), CHUNK).enumerate() {
            let mut tape = Tape::new();
            let x = Self::input(&mut tape, &chunk.to_owned());
            let e = self.forward(&mut tape, params, x);
            let v = tape.value(e);
            let v = v.view().into_shape_with_order((chunk.shape()[0], self.config.dim)).unwrap();
            out.slice_mut(s![i * CHUNK..i * CHUNK + chunk.shape()[0], ..]).assign(&v.mapv(|x| x.to_f64_lossy()));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("embedding network produced a non-finite value".into()));
        }
        Ok(out)
    }

    pub fn embed(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        self.embed_with(&self.params, images)
    }

    /// Activations `(N, h, w, K)` of a named layer, see [`LAYERS`].
    pub fn activations(&self, images: &Array4<f32>, layer: &str) -> Result<Array4<f64>> {
        self.check_images(images)?;
        let idx = LAYERS
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Config(format!("unknown layer {layer:?}; expected one of {LAYERS:?}")))?;
        let mut tape = Tape::new();
        let x = Self::input(&mut tape, images);
        let trace = self.trace(&mut tape, &self.params, x);
        let a = tape.value(trace.stages[idx]).mapv(|v| v.to_f64_lossy());
        a.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))
    }
}

impl FeatureExtractor for EmbeddingNet<f32> {
    fn descriptor(&self) -> String {
        format!("embedding network ({BACKBONE}), d={}", self.config.dim)
    }

    fn features(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        self.embed(images)
    }
}

/// Batch mean of `max(‖a−p‖² − ‖a−n‖² + margin, 0)` over rows.
pub fn triplet_loss(a: ArrayView2<f64>, p: ArrayView2<f64>, n: ArrayView2<f64>, margin: f64) -> Result<f64> {
    if a.shape() != p.shape() || a.shape() != n.shape() {
        return Err(Error::Shape(format!(
            "triplet embeddings differ in shape: {:?}, {:?}, {:?}",
            a.shape(),
            p.shape(),
            n.shape()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidInput(format!("margin must be nonnegative, got {margin}")));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidInput("empty triplet batch".into()));
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(p.rows())
        .zip(n.rows())
        .map(|((a, p), n)| (sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0))
        .sum();
    Ok(total / a.nrows() as f64)
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Label-conditioned syntheses x̂₀^(y) of every guide, keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct SyntheticSet {
    index: HashMap<String, usize>,
    ids: Vec<String>,
    images: Vec<[Array3<f32>; 2]>,
}

impl SyntheticSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, per_label: [Array3<f32>; 2]) {
        match self.index.get(id) {
            Some(&i) => self.images[i] = per_label,
            None => {
                self.index.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.images.push(per_label);
            }
        }
    }

    pub fn get(&self, id: &str, label: Label) -> Option<&Array3<f32>> {
        self.index.get(id).map(|&i| &self.images[i][label.index()])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Synthesizes both labels for every record.
    pub fn build<D: Denoiser + ?Sized>(
        schedule: &NoiseSchedule,
        model: &D,
        records: &[ImageRecord],
        config: &SynthesisConfig,
        chunk: usize,
    ) -> Result<Self> {
        let guides: Vec<&Array3<f32>> = records.iter().map(|r| &r.image).collect();
        let keys: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let [neg, pos] = synthesize_all_labels(schedule, model, &guides, &keys, config, chunk)?;
        let mut set = Self::new();
        for ((id, a), b) in keys.iter().zip(neg).zip(pos) {
            set.insert(id, [a, b]);
        }
        Ok(set)
    }

    /// Writes one PNG per (record, label) plus an `index.csv`, optionally
    /// opening with a comment line.
    pub fn save(&self, dir: &Path, comment: Option<&str>) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::with_capacity(2 * self.ids.len());
        for (id, pair) in self.ids.iter().zip(&self.images) {
            for label in Label::ALL {
                let rel = format!("{}__{}.png", sanitize(id), label.as_str());
                save_image(&dir.join(&rel), &pair[label.index()])?;
                rows.push([id.clone(), label.as_str().to_string(), rel]);
            }
        }
        let index = dir.join("index.csv");
        write_csv(&index, comment, &["record_id", "label", "image_path"], rows)?;
        Ok(index)
    }

    pub fn load(dir: &Path, resolution: usize) -> Result<Self> {
        let index = dir.join("index.csv");
        let mut r = csv_reader(&index)?;
        let mut partial: BTreeMap<String, [Option<Array3<f32>>; 2]> = BTreeMap::new();
        let mut order = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Manifest { row: row + 1, message: "expected record_id,label,image_path".into() });
            }
            let label: Label =
                rec[1].parse().map_err(|e: String| Error::Manifest { row: row + 1, message: e })?;
            let image = load_image(&dir.join(&rec[2]), resolution)?;
            let slot = partial.entry(rec[0].to_string()).or_insert_with(|| {
                order.push(rec[0].to_string());
                [None, None]
            });
            slot[label.index()] = Some(image);
        }
        let mut set = Self::new();
        for id in order {
            let [a, b] = partial.remove(&id).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => set.insert(&id, [a, b]),
                _ => return Err(Error::InvalidInput(format!("synthetic set lacks a label for record {id}"))),
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// B triplets with label(a) = label(p) ≠ label(n).
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Array4<f32>,
    pub positives: Array4<f32>,
    pub negatives: Array4<f32>,
    pub anchor_labels: Vec<Label>,
    /// Source of each (positive, negative) pair.
    pub provenance: Vec<Provenance>,
}

/// Uniform random triplets from real images. With probability `p_gen` a
/// triplet's positive and negative become the anchor's own syntheses under
/// its label and under the other label.
pub struct TripletSampler<'a> {
    real: &'a [ImageRecord],
    synthetic: Option<&'a SyntheticSet>,
    by_class: [Vec<usize>; 2],
    p_gen: f64,
    rng: ChaCha8Rng,
}

impl<'a> TripletSampler<'a> {
    pub fn new(real: &'a [ImageRecord], synthetic: Option<&'a SyntheticSet>, p_gen: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_gen) {
            return Err(Error::Config(format!("p_gen must lie in [0, 1], got {p_gen}")));
        }
        let mut by_class: [Vec<usize>; 2] = Default::default();
        for (i, r) in real.iter().enumerate() {
            by_class[r.label.index()].push(i);
        }
        if let Some(missing) = Label::ALL.iter().find(|l| by_class[l.index()].is_empty()) {
            return Err(Error::InvalidInput(format!("training set has no {missing} images")));
        }
        if p_gen > 0.0 {
            let syn = synthetic.ok_or_else(|| Error::Config("p_gen > 0 requires a synthetic set".into()))?;
            if let Some(r) = real.iter().find(|r| syn.get(&r.id, r.label).is_none()) {
                return Err(Error::InvalidInput(format!("synthetic set has no entry for record {}", r.id)));
            }
        }
        Ok(Self { real, synthetic, by_class, p_gen, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<TripletBatch> {
        let mut a = Vec::with_capacity(size);
        let mut p = Vec::with_capacity(size);
        let mut n = Vec::with_capacity(size);
        let mut anchor_labels = Vec::with_capacity(size);
        let mut provenance = Vec::with_capacity(size);
        for _ in 0..size {
            let ai = self.rng.random_range(0..self.real.len());
            let anchor = &self.real[ai];
            let same = &self.by_class[anchor.label.index()];
            let pi = if same.len() > 1 {
                loop {
                    let c = *same.choose(&mut self.rng).unwrap();
                    if c != ai {
                        break c;
                    }
                }
            } else {
                ai
            };
            let ni = *self.by_class[anchor.label.other().index()].choose(&mut self.rng).unwrap();
            let use_syn = self.p_gen > 0.0 && self.rng.random_bool(self.p_gen);
            a.push(&anchor.image);
            anchor_labels.push(anchor.label);
            if use_syn {
                let syn = self.synthetic.expect("checked in new");
                p.push(syn.get(&anchor.id, anchor.label).expect("checked in new"));
                n.push(syn.get(&anchor.id, anchor.label.other()).expect("checked in new"));
                provenance.push(Provenance::Synthetic);
            } else {
                p.push(&self.real[pi].image);
                n.push(&self.real[ni].image);
                provenance.push(Provenance::Real);
            }
        }
        Ok(TripletBatch {
            anchors: stack_images(a)?,
            positives: stack_images(p)?,
            negatives: stack_images(n)?,
            anchor_labels,
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub p_gen: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Triplets drawn per epoch; 0 means one per real training image.
    pub triplets_per_epoch: usize,
    /// Set from the run's root seed, never from the section itself.
    #[serde(default, skip_deserializing)]
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            p_gen: 0.2,
            epochs: 50,
            batch_size: 32,
            margin: 1.0,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            triplets_per_epoch: 0,
            seed: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_gen) {
            return Err(Error::Config(format!("p_gen must lie in [0, 1], got {}", self.p_gen)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be nonnegative, got {}", self.margin)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }
}

/// Records with their precomputed syntheses, used for model selection.
pub struct Validation<'a> {
    pub records: &'a [ImageRecord],
    pub synthetic: &'a SyntheticSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainOutcome {
    /// Mean triplet loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation distance-classification accuracy per epoch, when validating.
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Trains f_φ with the triplet loss and keeps the weights of the epoch with
/// the best validation accuracy, ties going to the larger mean distance
/// margin. Without validation data the last epoch is kept.
pub fn train_embedder<C>(
    model: &mut EmbeddingNet<f32>,
    real: &[ImageRecord],
    synthetic: Option<&SyntheticSet>,
    validation: Option<Validation<'_>>,
    config: &EmbedTrainConfig,
    mut on_epoch: C,
) -> Result<EmbedTrainOutcome>
where
    C: FnMut(usize, f64, Option<f64>),
{
    config.validate()?;
    let mut sampler = TripletSampler::new(real, synthetic, config.p_gen, component_rng(config.seed, "embed/triplets"))?;
    let per_epoch = if config.triplets_per_epoch == 0 { real.len() } else { config.triplets_per_epoch };
    let batches = per_epoch.div_ceil(config.batch_size);
    let mut opt = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let mut outcome = EmbedTrainOutcome { epoch_losses: Vec::new(), val_accuracy: Vec::new(), best_epoch: 0 };
    let mut best: Option<((f64, f64), ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for b in 0..batches {
            let size = config.batch_size.min(per_epoch - b * config.batch_size);
            let batch = sampler.next_batch(size)?;
            let mut tape = Tape::new();
            let p = model.params();
            let xa = EmbeddingNet::input(&mut tape, &batch.anchors);
            let xp = EmbeddingNet::input(&mut tape, &batch.positives);
            let xn = EmbeddingNet::input(&mut tape, &batch.negatives);
            let ea = model.forward(&mut tape, p, xa);
            let ep = model.forward(&mut tape, p, xp);
            let en = model.forward(&mut tape, p, xn);
            let loss = tape.triplet_loss(ea, ep, en, config.margin as f32);
            let value = tape.value(loss).sum() as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("triplet loss became {value} in epoch {epoch}")));
            }
            let grads = tape.backward(loss).params();
            opt.step(model.params_mut(), &grads);
            total += value * size as f64;
        }
        let mean_loss = total / per_epoch as f64;
        outcome.epoch_losses.push(mean_loss);
        let scores = match &validation {
            Some(v) => Some(validation_scores(model, v)?),
            None => None,
        };
        if let Some(score) = scores {
            outcome.val_accuracy.push(score.0);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params().clone()));
                outcome.best_epoch = epoch;
            }
        } else {
            outcome.best_epoch = epoch;
        }
        on_epoch(epoch, mean_loss, scores.map(|s| s.0));
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from(&params);
    }
    Ok(outcome)
}

/// Fraction of records whose minimum-distance label matches the truth.
pub fn validation_accuracy(model: &EmbeddingNet<f32>, v: &Validation<'_>) -> Result<f64> {
    Ok(validation_scores(model, v)?.0)
}

/// Accuracy and the mean distance margin `d(wrong label) − d(true label)`.
pub fn validation_scores(model: &EmbeddingNet<f32>, v: &Validation<'_>) -> Result<(f64, f64)> {
    if v.records.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    let (mut correct, mut margin) = (0usize, 0.0);
    for chunk in v.records.chunks(64) {
        for (r, rec) in classify_records(model, chunk, v.synthetic)?.iter().zip(chunk) {
            correct += usize::from(r.predicted_label == rec.label);
            margin += r.distances[&rec.label.other()] - r.distances[&rec.label];
        }
    }
    let n = v.records.len() as f64;
    Ok((correct as f64 / n, margin / n))
}

/// Minimum-distance decision for every record using stored syntheses.
pub fn classify_records(
    model: &EmbeddingNet<f32>,
    records: &[ImageRecord],
    synthetic: &SyntheticSet,
) -> Result<Vec<ClassificationResult>> {
    let mut syn = [Vec::with_capacity(records.len()), Vec::with_capacity(records.len())];
    for r in records {
        for label in Label::ALL {
            let img = synthetic
                .get(&r.id, label)
                .ok_or_else(|| Error::InvalidInput(format!("no {label} synthesis for record {}", r.id)))?;
            syn[label.index()].push(img);
        }
    }
    let originals = stack_images(records.iter().map(|r| &r.image))?;
    let [s0, s1] = syn;
    classify_batch(model, &originals, [&stack_images(s0)?, &stack_images(s1)?])
}

/// Outcome of the minimum-distance rule for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted_label: Label,
    /// Squared L2 distance in embedding space between the image and its synthesis under each label.
    pub distances: BTreeMap<Label, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub syntheses: Vec<String>,
    #[serde(default)]
    pub config_hash: String,
}

/// argmin over labels; exact ties go to the label with index 0.
pub fn decide(distances: &BTreeMap<Label, f64>) -> Result<Label> {
    let mut best: Option<(Label, f64)> = None;
    for label in Label::ALL {
        let d = *distances.get(&label).ok_or_else(|| Error::InvalidInput(format!("missing distance for {label}")))?;
        if d.is_nan() {
            return Err(Error::Numerical(format!("distance for {label} is NaN")));
        }
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((label, d));
        }
    }
    Ok(best.unwrap().0)
}

/// Applies the decision rule to precomputed embeddings.
pub fn classify_embeddings(original: ArrayView1<f64>, per_label: [ArrayView1<f64>; 2]) -> Result<ClassificationResult> {
    let distances: BTreeMap<Label, f64> =
        Label::ALL.iter().map(|&l| (l, sq_dist(original, per_label[l.index()]))).collect();
    Ok(ClassificationResult { predicted_label: decide(&distances)?, distances, syntheses: Vec::new(), config_hash: String::new() })
}

/// Classifies each original against its per-label syntheses (index = label).
pub fn classify_batch(
    model: &EmbeddingNet<f32>,
    originals: &Array4<f32>,
    syntheses: [&Array4<f32>; 2],
) -> Result<Vec<ClassificationResult>> {
    if syntheses.iter().any(|s| s.shape() != originals.shape()) {
        return Err(Error::Shape("syntheses must match the originals' shape".into()));
    }
    let e0 = model.embed(originals)?;
    let e1 = model.embed(syntheses[0])?;
    let e2 = model.embed(syntheses[1])?;
    (0..e0.nrows()).map(|i| classify_embeddings(e0.row(i), [e1.row(i), e2.row(i)])).collect()
}

/// Classifies one image given a synthesis for every label.
pub fn classify(
    model: &EmbeddingNet<f32>,
    original: &Array3<f32>,
    syntheses: &[(Label, &Array3<f32>)],
) -> Result<ClassificationResult> {
    let find = |label: Label| {
        syntheses
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, img)| *img)
            .ok_or_else(|| Error::InvalidInput(format!("missing synthesis for label {label}")))
    };
    let one = |img: &Array3<f32>| img.clone().insert_axis(Axis(0));
    let s0 = one(find(Label::NoInfection)?);
    let s1 = one(find(Label::Infection)?);
    let mut out = classify_batch(model, &one(original), [&s0, &s1])?;
    Ok(out.remove(0))
}

/// The full inference path: guided synthesis under each label, then the
/// minimum-distance decision.
pub fn end_to_end_predict<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    embedder: &EmbeddingNet<f32>,
    image: &Array3<f32>,
    config: &SynthesisConfig,
) -> Result<ClassificationResult> {
    let mut out = predict_batch(schedule, denoiser, embedder, &[image], &["guide".to_string()], config, 1)?;
    Ok(out.remove(0))
}

/// [`end_to_end_predict`] over many images. `keys` name each image's noise
/// stream, so a result does not depend on batch composition.
pub fn predict_batch<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    embedder: &EmbeddingNet<f32>,
    images: &[&Array3<f32>],
    keys: &[String],
    config: &SynthesisConfig,
    chunk: usize,
) -> Result<Vec<ClassificationResult>> {
    let [s0, s1] = synthesize_all_labels(schedule, denoiser, images, keys, config, chunk)?;
    let originals = stack_images(images.iter().copied())?;
    classify_batch(embedder, &originals, [&stack_images(&s0)?, &stack_images(&s1)?])
}

/// Writes `(record id, label, d-vector)` rows for external projection tools.
pub fn write_embeddings_csv(
    path: &Path,
    ids: &[String],
    labels: &[Label],
    embeddings: &Array2<f64>,
    comment: Option<&str>,
) -> Result<()> {
    if ids.len() != embeddings.nrows() || labels.len() != embeddings.nrows() {
        return Err(Error::Shape("ids, labels and embeddings must have equal length".into()));
    }
    let names: Vec<String> = (0..embeddings.ncols()).map(|j| format!("e{j}")).collect();
    let mut header = vec!["record_id", "label"];
    header.extend(names.iter().map(String::as_str));
    let rows = ids.iter().zip(labels).zip(embeddings.rows()).map(|((id, label), row)| {
        let mut rec = vec![id.clone(), label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec
    });
    write_csv(path, comment, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy_dataset;
    use ndarray::array;

    fn small_net() -> EmbeddingNet<f32> {
        let cfg = EmbeddingConfig { channels: [4, 4, 8], dim: 5, image_channels: 3, resolution: 16 };
        EmbeddingNet::new(cfg, &mut component_rng(1, "embed")).unwrap()
    }

    #[test]
    fn triplet_hand_examples() {
        let a = array![[0.0, 0.0]];
        let t = |p: Array2<f64>, n: Array2<f64>| triplet_loss(a.view(), p.view(), n.view(), 1.0).unwrap();
        assert_eq!(t(array![[1.0, 0.0]], array![[0.0, 2.0]]), 0.0);
        assert_eq!(t(array![[0.0, 1.0]], array![[1.0, 0.0]]), 1.0);
        assert_eq!(triplet_loss(a.view(), a.view(), a.view(), 0.7).unwrap(), 0.7);
        assert!(triplet_loss(a.view(), array![[1.0]].view(), a.view(), 1.0).is_err());
    }

    #[test]
    fn decision_rule_and_ties() {
        let d = |x: f64, y: f64| BTreeMap::from([(Label::NoInfection, x), (Label::Infection, y)]);
        assert_eq!(decide(&d(0.3, 0.5)).unwrap(), Label::NoInfection);
        assert_eq!(decide(&d(0.5, 0.3)).unwrap(), Label::Infection);
        assert_eq!(decide(&d(0.4, 0.4)).unwrap(), Label::NoInfection);
        assert!(decide(&BTreeMap::from([(Label::Infection, 0.1)])).is_err());
    }

    #[test]
    fn classify_ignores_synthesis_order_and_embeddings_are_unit_norm() {
        let net = small_net();
        let data = generate_toy_dataset(2, 16, 4).unwrap();
        let (x, s0, s1) = (&data[0].image, &data[1].image, &data[2].image);
        let a = classify(&net, x, &[(Label::NoInfection, s0), (Label::Infection, s1)]).unwrap();
        let b = classify(&net, x, &[(Label::Infection, s1), (Label::NoInfection, s0)]).unwrap();
        assert_eq!(a, b);
        assert!(classify(&net, x, &[(Label::Infection, s1)]).is_err());
        let e = net.embed(&stack_images(data.iter().map(|r| &r.image)).unwrap()).unwrap();
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sampler_without_generation_uses_only_real_images() {
        let data = generate_toy_dataset(6, 16, 2).unwrap();
        let mut s = TripletSampler::new(&data, None, 0.0, component_rng(0, "t")).unwrap();
        for _ in 0..20 {
            let b = s.next_batch(8).unwrap();
            assert!(b.provenance.iter().all(|&p| p == Provenance::Real));
        }
        assert!(TripletSampler::new(&data, None, 0.5, component_rng(0, "t")).is_err());
        let one_class: Vec<ImageRecord> = data.iter().filter(|r| r.label == Label::Infection).cloned().collect();
        assert!(TripletSampler::new(&one_class, None, 0.0, component_rng(0, "t")).is_err());
    }

    #[test]
    fn sampler_triplets_respect_labels() {
        let data = generate_toy_dataset(5, 16, 3).unwrap();
        let mut syn = SyntheticSet::new();
        for r in &data {
            syn.insert(&r.id, [r.image.mapv(|v| v * 0.5), r.image.mapv(|v| -v)]);
        }
        let record_of = |img: &Array3<f32>| data.iter().find(|r| r.image == *img).unwrap();
        let mut s = TripletSampler::new(&data, Some(&syn), 0.5, component_rng(0, "t")).unwrap();
        let b = s.next_batch(64).unwrap();
        assert!(b.provenance.contains(&Provenance::Synthetic) && b.provenance.contains(&Provenance::Real));
        for i in 0..64 {
            let a = record_of(&b.anchors.index_axis(Axis(0), i).to_owned());
            let p = b.positives.index_axis(Axis(0), i).to_owned();
            let n = b.negatives.index_axis(Axis(0), i).to_owned();
            assert_eq!(a.label, b.anchor_labels[i]);
            match b.provenance[i] {
                Provenance::Real => {
                    assert_eq!(record_of(&p).label, a.label);
                    assert_ne!(record_of(&p).id, a.id);
                    assert_eq!(record_of(&n).label, a.label.other());
                }
                Provenance::Synthetic => {
                    assert_eq!(&p, syn.get(&a.id, a.label).unwrap());
                    assert_eq!(&n, syn.get(&a.id, a.label.other()).unwrap());
                }
            }
        }
    }

    #[test]
    fn synthetic_set_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_toy_dataset(2, 16, 5).unwrap();
        let mut syn = SyntheticSet::new();
        for r in &data {
            syn.insert(&r.id, [r.image.clone(), r.image.mapv(|v| -v)]);
        }
        syn.save(dir.path(), Some("config_hash: x")).unwrap();
        let back = SyntheticSet::load(dir.path(), 16).unwrap();
        assert_eq!(back.ids(), syn.ids());
        for r in &data {
            for l in Label::ALL {
                let diff = (back.get(&r.id, l).unwrap() - syn.get(&r.id, l).unwrap()).mapv(f32::abs);
                assert!(diff.iter().all(|&d| d <= 1.0 / 255.0 + 1e-6));
            }
        }
    }

    #[test]
    fn embedding_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        write_embeddings_csv(&path, &["a".into(), "b".into()], &[Label::Infection, Label::NoInfection], &e, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "record_id,label,e0,e1");
        assert_eq!(lines[1], "a,infection,1,0");
        assert_eq!(lines.len(), 3);
    }
}
