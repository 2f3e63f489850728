//! Evaluation drivers: end-to-end accuracy, the noise-strength sweep and the
//! sampler comparison.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, ImageRecord, Label};
use crate::denoiser::Denoiser;
use crate::embedding_classifier::{classify_batch, ClassificationResult, EmbeddingNet};
use crate::metrics::{classification_metrics, ClassificationMetrics, ConfusionCounts};
use crate::samplers::{synthesize_all_labels, SamplerKind, SynthesisConfig};
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

/// Mean of `‖x̂₀^(y₁) − x̂₀^(y₂)‖²` over paired syntheses.
pub fn condition_gap(per_label: &[Vec<Array3<f32>>; 2]) -> Result<f64> {
    let [a, b] = per_label;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput("condition gap needs equal, nonempty synthesis lists".into()));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(total / a.len() as f64)
}

/// Predictions and syntheses of one synthesis path over a record set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: Vec<ClassificationResult>,
    pub metrics: ClassificationMetrics,
    pub syntheses: [Vec<Array3<f32>>; 2],
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<Label> {
        self.results.iter().map(|r| r.predicted_label).collect()
    }
}

/// Runs the full inference path over `records`; each record's id keys its noise.
pub fn evaluate_records<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    embedder: &EmbeddingNet<f32>,
    records: &[ImageRecord],
    config: &SynthesisConfig,
    chunk: usize,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    let guides: Vec<&Array3<f32>> = records.iter().map(|r| &r.image).collect();
    let keys: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let syntheses = synthesize_all_labels(schedule, denoiser, &guides, &keys, config, chunk)?;
    let originals = stack_images(guides.iter().copied())?;
    let results = classify_batch(embedder, &originals, [&stack_images(&syntheses[0])?, &stack_images(&syntheses[1])?])?;
    let truth: Vec<Label> = records.iter().map(|r| r.label).collect();
    let predicted: Vec<Label> = results.iter().map(|r| r.predicted_label).collect();
    let metrics = classification_metrics(ConfusionCounts::from_predictions(&truth, &predicted)?);
    Ok(Evaluation { results, metrics, syntheses })
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_baseline(records: &[ImageRecord]) -> f64 {
    let pos = records.iter().filter(|r| r.label == Label::Infection).count();
    pos.max(records.len() - pos) as f64 / records.len().max(1) as f64
}

/// One row of the noise-strength sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t0: f64,
    #[serde(flatten)]
    pub metrics: ClassificationMetrics,
    /// Mean inter-condition gap over the first `guides` records.
    pub gap: f64,
    pub guides: usize,
    pub n: usize,
}

/// Evaluates every `t0` with all other settings fixed. The gap is measured
/// on the first `gap_guides` records (or all of them when fewer).
pub fn ablate_t0<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    embedder: &EmbeddingNet<f32>,
    records: &[ImageRecord],
    base: &SynthesisConfig,
    t0_list: &[f64],
    gap_guides: usize,
    chunk: usize,
) -> Result<Vec<AblationRow>> {
    if t0_list.is_empty() {
        return Err(Error::Config("t0 list is empty".into()));
    }
    let guides = gap_guides.min(records.len());
    t0_list
        .iter()
        .map(|&t0| {
            let config = SynthesisConfig { t0, ..base.clone() };
            let eval = evaluate_records(schedule, denoiser, embedder, records, &config, chunk)?;
            let [a, b] = &eval.syntheses;
            let gap = condition_gap(&[a[..guides].to_vec(), b[..guides].to_vec()])?;
            Ok(AblationRow { t0, metrics: eval.metrics, gap, guides, n: records.len() })
        })
        .collect()
}

/// One row of the sampler comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerRow {
    pub sampler: SamplerKind,
    /// Guidance scale, absent for the purely conditional path.
    pub omega: Option<f64>,
    #[serde(flatten)]
    pub metrics: ClassificationMetrics,
    pub n: usize,
}

/// DDIM (conditional prediction only) against CFG-DDIM, sharing seeds and
/// every other setting of `base`.
pub fn compare_samplers<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    embedder: &EmbeddingNet<f32>,
    records: &[ImageRecord],
    base: &SynthesisConfig,
    chunk: usize,
) -> Result<[SamplerRow; 2]> {
    let run = |kind: SamplerKind| -> Result<SamplerRow> {
        let config = SynthesisConfig { sampler_kind: kind, ..base.clone() };
        let eval = evaluate_records(schedule, denoiser, embedder, records, &config, chunk)?;
        Ok(SamplerRow {
            sampler: kind,
            omega: (kind == SamplerKind::CfgDdim).then_some(base.omega),
            metrics: eval.metrics,
            n: records.len(),
        })
    };
    Ok([run(SamplerKind::Ddim)?, run(SamplerKind::CfgDdim)?])
}
