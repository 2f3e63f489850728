use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use condiff::checkpoint::{
    load_diffusion, load_embedder, save_diffusion, save_embedder, write_atomic, DiffusionCheckpointMeta,
    EmbedderCheckpointMeta,
};
use condiff::config::RunConfig;
use condiff::data::{dataset_hash, export_manifest, load_image, save_image, split_subjectwise, retain_magnification, load_manifest, stack_images, ImageRecord, Label};
use condiff::denoiser::{ConditionalUNet, DiffusionModel, TrainableDenoiser};
use condiff::diffusion_training::train_diffusion;
use condiff::embedding_classifier::{classify as classify_one, train_embedder, write_embeddings_csv, EmbeddingNet, SyntheticSet, Validation};
use condiff::explain::{render_overlay, score_cam};
use condiff::metrics::{
    centroid_class_probabilities, frechet_distance, inception_style_score, silhouette_score, ClassificationMetrics,
    FeatureExtractor,
};
use condiff::output::{hash_comment, write_csv, write_json};
use condiff::pipeline::{ablate_t0, compare_samplers, evaluate_records, majority_baseline};
use condiff::rng::{component_rng, derive_seed};
use condiff::samplers::{synthesize_guided, SynthesisConfig};
use condiff::schedules::NoiseSchedule;
use condiff::Error;
use log::info;
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command, Common};

const OUTPUT_ENV: &str = "CONDIFF_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "condiff-output";
/// Softmax temperature over squared centroid distances of unit-norm embeddings.
const IS_TEMPERATURE: f64 = 0.1;
const FEATURE_CAVEAT: &str =
    "features come from the toy-trained embedding network; values are not comparable to Inception-based scores";

/// Resolved configuration and output location shared by every command.
struct Run {
    config: RunConfig,
    hash: String,
    out: PathBuf,
    schedule: NoiseSchedule,
    diffusion_path: PathBuf,
    embedder_path: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
        let out = common
            .output_dir
            .clone()
            .or_else(|| config.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
        let schedule = config.schedule.build()?;
        let hash = config.hash();
        let diffusion_path = common.diffusion.clone().unwrap_or_else(|| out.join("diffusion.ckpt"));
        let embedder_path = common.embedder.clone().unwrap_or_else(|| out.join("embedder.ckpt"));
        let run = Self { config, hash, out, schedule, diffusion_path, embedder_path };
        let text = format!("# {}\n{}", hash_comment(&run.hash), run.config.to_toml_string());
        write_atomic(&run.out.join("run-config.toml"), text.as_bytes())?;
        Ok(run)
    }

    fn comment(&self) -> String {
        hash_comment(&self.hash)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// The denoiser with the schedule it was trained under.
    fn diffusion(&self) -> Result<(DiffusionModel, NoiseSchedule, String)> {
        let (model, meta, sha) = load_diffusion(&self.diffusion_path)
            .with_context(|| format!("loading denoiser checkpoint {}", self.diffusion_path.display()))?;
        if meta.schedule != self.config.schedule {
            log::warn!("checkpoint schedule differs from the configured one; using the checkpoint's");
        }
        Ok((model, meta.schedule.build()?, sha))
    }

    fn embedder(&self) -> Result<(EmbeddingNet<f32>, String)> {
        let (net, _, sha) = load_embedder(&self.embedder_path)
            .with_context(|| format!("loading embedder checkpoint {}", self.embedder_path.display()))?;
        Ok((net, sha))
    }

    fn load_input(&self, image: &Path) -> Result<ndarray::Array3<f32>> {
        Ok(load_image(image, self.config.model.resolution)?)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let run = Run::new(&cli.common)?;
    info!("config hash {}; writing to {}", run.hash, run.out.display());
    match cli.command {
        Command::GenerateToy => generate_toy(&run),
        Command::Split => split(&run),
        Command::TrainDiffusion => cmd_train_diffusion(&run),
        Command::BuildSyntheticSet => build_synthetic_set(&run),
        Command::TrainEmbedder => cmd_train_embedder(&run),
        Command::Classify { image } => classify(&run, &image),
        Command::Evaluate => evaluate(&run),
        Command::Synthesize { image, label } => synthesize(&run, &image, label),
        Command::Explain { image } => explain(&run, &image),
        Command::AblateT0 { t0 } => cmd_ablate_t0(&run, t0),
        Command::CompareSamplers => cmd_compare_samplers(&run),
    }
}

fn generate_toy(run: &Run) -> Result<()> {
    if run.config.data.manifest.is_some() {
        return Err(Error::Config("generate-toy writes the toy set; unset data.manifest".into()).into());
    }
    let records: Vec<ImageRecord> = run.config.load_partitions()?.into_iter().flatten().collect();
    let manifest = export_manifest(&records, &run.path("toy"), Some(&run.comment()))?;
    info!("wrote {} records to {}", records.len(), manifest.display());
    print_json(&json!({ "manifest": manifest, "records": records.len(), "config_hash": run.hash }))
}

fn split(run: &Run) -> Result<()> {
    let c = &run.config;
    let (parts, report) = match &c.data.manifest {
        Some(path) => {
            let records = load_manifest(path, c.model.resolution)?;
            let (kept, magnification) = retain_magnification(records);
            let s = split_subjectwise(kept, c.data.split, derive_seed(c.seed, "split"), c.data.stratify)?;
            let report = json!({ "split": s.report, "magnification": magnification });
            ([s.train, s.validation, s.test], report)
        }
        None => (c.load_partitions()?, json!({ "source": "toy" })),
    };
    let names = ["train", "validation", "test"];
    let rows = parts.iter().zip(names).flat_map(|(part, name)| {
        part.iter().map(move |r| [r.id.clone(), r.subject_id.clone(), r.label.to_string(), name.to_string()])
    });
    write_csv(&run.path("split/assignments.csv"), Some(&run.comment()), &["record_id", "subject_id", "label", "partition"], rows)?;
    let counts: BTreeMap<&str, usize> = names.iter().zip(&parts).map(|(n, p)| (*n, p.len())).collect();
    let summary = json!({ "counts": counts, "report": report, "config_hash": run.hash });
    write_json(&run.path("split/report.json"), &summary)?;
    print_json(&summary)
}

fn cmd_train_diffusion(run: &Run) -> Result<()> {
    let c = &run.config;
    let [train, _, _] = c.load_partitions()?;
    let mut net = ConditionalUNet::<f32>::new(c.model.clone(), c.schedule.t_train, &mut component_rng(c.train.seed, "diffusion/init"))?;
    let meta = |step| DiffusionCheckpointMeta::new(c.model.clone(), c.schedule.clone(), step, run.hash.clone());
    info!("training the denoiser on {} images for {} steps", train.len(), c.train.steps);
    let outcome = train_diffusion(&run.schedule, &mut net, &train, &c.train, |step, params, ema| {
        let path = run.path(&format!("checkpoints/diffusion-step{step:06}.ckpt"));
        save_diffusion(&path, &meta(step), params, Some(ema)).map(|_| ())
    })?;
    let sha = save_diffusion(&run.diffusion_path, &meta(c.train.steps), net.params(), Some(&outcome.ema))?;
    let rows = outcome.loss_trace.iter().enumerate().map(|(i, l)| [(i + 1).to_string(), l.to_string()]);
    write_csv(&run.path("loss.csv"), Some(&run.comment()), &["step", "loss"], rows)?;
    let tail = &outcome.loss_trace[outcome.loss_trace.len().saturating_sub(100)..];
    let final_loss = if tail.is_empty() { None } else { Some(tail.iter().sum::<f64>() / tail.len() as f64) };
    print_json(&json!({
        "checkpoint": run.diffusion_path,
        "checkpoint_sha256": sha,
        "steps": c.train.steps,
        "final_mean_loss": final_loss,
        "config_hash": run.hash,
    }))
}

fn build_synthetic_set(run: &Run) -> Result<()> {
    let c = &run.config;
    let (model, schedule, sha) = run.diffusion()?;
    let [train, validation, _] = c.load_partitions()?;
    let train_cfg = c.synthetic_set_config();
    info!("synthesizing {} training guides under both labels", train.len());
    let ds = SyntheticSet::build(&schedule, &model, &train, &train_cfg, c.eval.chunk)?;
    ds.save(&run.path("synthetic/train"), Some(&run.comment()))?;
    info!("synthesizing {} validation guides under both labels", validation.len());
    let vs = SyntheticSet::build(&schedule, &model, &validation, &c.synth, c.eval.chunk)?;
    vs.save(&run.path("synthetic/validation"), Some(&run.comment()))?;
    let meta = json!({
        "train": { "records": ds.len(), "synthesis": train_cfg },
        "validation": { "records": vs.len(), "synthesis": c.synth },
        "diffusion_checkpoint_sha256": sha,
        "config_hash": run.hash,
    });
    write_json(&run.path("synthetic/meta.json"), &meta)?;
    print_json(&meta)
}

fn cmd_train_embedder(run: &Run) -> Result<()> {
    let c = &run.config;
    let res = c.model.resolution;
    let [train, validation, _] = c.load_partitions()?;
    let ds = if c.embed.train.p_gen > 0.0 { Some(SyntheticSet::load(&run.path("synthetic/train"), res)?) } else { None };
    let vs_dir = run.path("synthetic/validation");
    let vs = if vs_dir.join("index.csv").is_file() { Some(SyntheticSet::load(&vs_dir, res)?) } else { None };
    if vs.is_none() {
        log::warn!("no validation syntheses under {}; keeping the last epoch", vs_dir.display());
    }
    let mut net = EmbeddingNet::<f32>::new(c.embed.network.clone(), &mut component_rng(c.embed.train.seed, "embed/init"))?;
    let val = vs.as_ref().map(|s| Validation { records: &validation, synthetic: s });
    let outcome = train_embedder(&mut net, &train, ds.as_ref(), val, &c.embed.train, |epoch, loss, acc| {
        info!("epoch {epoch}: triplet loss {loss:.5}, validation accuracy {acc:?}");
    })?;
    let meta = EmbedderCheckpointMeta::new(c.embed.network.clone(), outcome.best_epoch, run.hash.clone());
    let sha = save_embedder(&run.embedder_path, &meta, net.params())?;
    let rows = outcome.epoch_losses.iter().enumerate().map(|(i, l)| {
        let acc = outcome.val_accuracy.get(i).map(|a| a.to_string()).unwrap_or_default();
        [(i + 1).to_string(), l.to_string(), acc]
    });
    write_csv(&run.path("embedder_history.csv"), Some(&run.comment()), &["epoch", "loss", "val_accuracy"], rows)?;
    print_json(&json!({
        "checkpoint": run.embedder_path,
        "checkpoint_sha256": sha,
        "best_epoch": outcome.best_epoch,
        "val_accuracy": outcome.val_accuracy,
        "config_hash": run.hash,
    }))
}

fn classify(run: &Run, image: &Path) -> Result<()> {
    let (model, schedule, _) = run.diffusion()?;
    let (embedder, _) = run.embedder()?;
    let x0 = run.load_input(image)?;
    let name = stem(image);
    let mut syntheses = Vec::new();
    let mut paths = Vec::new();
    for label in Label::ALL {
        let syn = synthesize_guided(&schedule, &model, &x0, label, &run.config.synth)?;
        let path = run.path(&format!("classify/{name}__{label}.png"));
        save_image(&path, &syn)?;
        paths.push(path.display().to_string());
        syntheses.push((label, syn));
    }
    let pairs: Vec<(Label, &ndarray::Array3<f32>)> = syntheses.iter().map(|(l, s)| (*l, s)).collect();
    let mut result = classify_one(&embedder, &x0, &pairs)?;
    result.syntheses = paths;
    result.config_hash = run.hash.clone();
    write_json(&run.path(&format!("classify/{name}.json")), &result)?;
    print_json(&result)
}

#[derive(Serialize)]
struct EvaluationReport {
    classification: ClassificationMetrics,
    majority_baseline: f64,
    fid: f64,
    #[serde(rename = "is")]
    inception_style: f64,
    silhouette: f64,
    n: usize,
    feature_extractor: String,
    caveat: &'static str,
    synthesis: SynthesisConfig,
    config_hash: String,
    dataset_hash: String,
}

fn evaluate(run: &Run) -> Result<()> {
    let c = &run.config;
    let (model, schedule, _) = run.diffusion()?;
    let (embedder, _) = run.embedder()?;
    let [train, _, test] = c.load_partitions()?;
    info!("evaluating {} test images", test.len());
    let eval = evaluate_records(&schedule, &model, &embedder, &test, &c.synth, c.eval.chunk)?;
    let real = stack_images(test.iter().map(|r| &r.image))?;
    let real_feats = embedder.features(&real)?;
    let matched: Vec<_> = test.iter().enumerate().map(|(i, r)| &eval.syntheses[r.label.index()][i]).collect();
    let syn_feats = embedder.features(&stack_images(matched)?)?;
    let fid = frechet_distance(real_feats.view(), syn_feats.view())?;
    let train_feats = embedder.features(&stack_images(train.iter().map(|r| &r.image))?)?;
    let centroids = class_centroids(&train_feats, &train)?;
    let all_syn = stack_images(eval.syntheses[0].iter().chain(&eval.syntheses[1]))?;
    let probs = centroid_class_probabilities(embedder.features(&all_syn)?.view(), centroids.view(), IS_TEMPERATURE)?;
    let labels: Vec<usize> = test.iter().map(|r| r.label.index()).collect();
    let report = EvaluationReport {
        classification: eval.metrics,
        majority_baseline: majority_baseline(&test),
        fid,
        inception_style: inception_style_score(probs.view())?,
        silhouette: silhouette_score(real_feats.view(), &labels)?,
        n: test.len(),
        feature_extractor: embedder.descriptor(),
        caveat: FEATURE_CAVEAT,
        synthesis: c.synth.clone(),
        config_hash: run.hash.clone(),
        dataset_hash: dataset_hash(&test),
    };
    write_json(&run.path("evaluation/metrics.json"), &report)?;
    let rows = test.iter().zip(&eval.results).map(|(r, res)| {
        [
            r.id.clone(),
            r.label.to_string(),
            res.predicted_label.to_string(),
            res.distances[&Label::NoInfection].to_string(),
            res.distances[&Label::Infection].to_string(),
        ]
    });
    write_csv(
        &run.path("evaluation/predictions.csv"),
        Some(&run.comment()),
        &["record_id", "label", "predicted_label", "distance_no_infection", "distance_infection"],
        rows,
    )?;
    let ids: Vec<String> = test.iter().map(|r| r.id.clone()).collect();
    let truth: Vec<Label> = test.iter().map(|r| r.label).collect();
    write_embeddings_csv(&run.path("evaluation/embeddings.csv"), &ids, &truth, &real_feats, Some(&run.comment()))?;
    print_json(&report)
}

fn class_centroids(features: &Array2<f64>, records: &[ImageRecord]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((Label::ALL.len(), features.ncols()));
    for label in Label::ALL {
        let idx: Vec<usize> = records.iter().enumerate().filter(|(_, r)| r.label == label).map(|(i, _)| i).collect();
        if idx.is_empty() {
            bail!("no {label} records to form a class centroid");
        }
        out.row_mut(label.index()).assign(&features.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap());
    }
    Ok(out)
}

fn synthesize(run: &Run, image: &Path, label: Option<Label>) -> Result<()> {
    let (model, schedule, sha) = run.diffusion()?;
    let x0 = run.load_input(image)?;
    let name = stem(image);
    let labels: Vec<Label> = label.map(|l| vec![l]).unwrap_or_else(|| Label::ALL.to_vec());
    let mut outputs = BTreeMap::new();
    for l in labels {
        let syn = synthesize_guided(&schedule, &model, &x0, l, &run.config.synth)?;
        let path = run.path(&format!("synthesize/{name}__{l}.png"));
        save_image(&path, &syn)?;
        outputs.insert(l, path);
    }
    let sidecar = json!({
        "input": image,
        "outputs": outputs,
        "synthesis": run.config.synth,
        "diffusion_checkpoint_sha256": sha,
        "config_hash": run.hash,
    });
    write_json(&run.path(&format!("synthesize/{name}.json")), &sidecar)?;
    print_json(&sidecar)
}

fn explain(run: &Run, image: &Path) -> Result<()> {
    let (model, schedule, _) = run.diffusion()?;
    let (embedder, _) = run.embedder()?;
    let x0 = run.load_input(image)?;
    let name = stem(image);
    let layer = &run.config.embed.cam_layer;
    let mut per_label = BTreeMap::new();
    for label in Label::ALL {
        let syn = synthesize_guided(&schedule, &model, &x0, label, &run.config.synth)?;
        let cam = score_cam(&embedder, &x0, &syn, layer)?;
        let syn_path = run.path(&format!("explain/{name}__{label}.png"));
        let cam_path = run.path(&format!("explain/{name}__{label}_scorecam.png"));
        save_image(&syn_path, &syn)?;
        save_image(&cam_path, &render_overlay(&syn, &cam.heatmap))?;
        per_label.insert(label, json!({
            "alpha": cam.alpha,
            "similarity": cam.similarity,
            "synthesis": syn_path,
            "overlay": cam_path,
        }));
    }
    let report = json!({ "input": image, "layer": layer, "labels": per_label, "config_hash": run.hash });
    write_json(&run.path(&format!("explain/{name}.json")), &report)?;
    print_json(&report)
}

fn metric_cells(m: &ClassificationMetrics) -> Vec<String> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
    vec![cell(m.accuracy), cell(m.sensitivity), cell(m.specificity), cell(m.ppv), cell(m.f1)]
}

const METRIC_COLUMNS: [&str; 5] = ["accuracy", "sensitivity", "specificity", "ppv", "f1"];

fn cmd_ablate_t0(run: &Run, t0: Option<Vec<f64>>) -> Result<()> {
    let c = &run.config;
    let t0_list = t0.unwrap_or_else(|| c.eval.t0_list.clone());
    for &t in &t0_list {
        SynthesisConfig { t0: t, ..c.synth.clone() }.validate(&run.schedule).map_err(|e| Error::Config(e.to_string()))?;
    }
    let (model, schedule, _) = run.diffusion()?;
    let (embedder, _) = run.embedder()?;
    let [_, _, test] = c.load_partitions()?;
    let rows = ablate_t0(&schedule, &model, &embedder, &test, &c.synth, &t0_list, c.eval.gap_guides, c.eval.chunk)?;
    let mut header = vec!["t0"];
    header.extend(METRIC_COLUMNS);
    header.extend(["gap", "guides", "n"]);
    let cells = rows.iter().map(|r| {
        let mut v = vec![r.t0.to_string()];
        v.extend(metric_cells(&r.metrics));
        v.extend([r.gap.to_string(), r.guides.to_string(), r.n.to_string()]);
        v
    });
    write_csv(&run.path("ablation_t0.csv"), Some(&run.comment()), &header, cells)?;
    let report = json!({ "rows": rows, "config_hash": run.hash });
    write_json(&run.path("ablation_t0.json"), &report)?;
    print_json(&report)
}

fn cmd_compare_samplers(run: &Run) -> Result<()> {
    let c = &run.config;
    let (model, schedule, _) = run.diffusion()?;
    let (embedder, _) = run.embedder()?;
    let [_, _, test] = c.load_partitions()?;
    let rows = compare_samplers(&schedule, &model, &embedder, &test, &c.synth, c.eval.chunk)?;
    let mut header = vec!["sampler", "omega"];
    header.extend(METRIC_COLUMNS);
    header.push("n");
    let cells = rows.iter().map(|r| {
        let mut v = vec![r.sampler.to_string(), r.omega.map(|o| o.to_string()).unwrap_or_default()];
        v.extend(metric_cells(&r.metrics));
        v.push(r.n.to_string());
        v
    });
    write_csv(&run.path("compare_samplers.csv"), Some(&run.comment()), &header, cells)?;
    let report = json!({ "rows": rows, "config_hash": run.hash });
    write_json(&run.path("compare_samplers.json"), &report)?;
    print_json(&report)
}
