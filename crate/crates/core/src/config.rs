//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{generate_toy_dataset, load_manifest, retain_magnification, split_subjectwise, ImageRecord, SplitFractions};
use crate::denoiser::UNetConfig;
use crate::diffusion_training::DiffusionTrainConfig;
use crate::embedding_classifier::{EmbedTrainConfig, EmbeddingConfig};
use crate::explain::DEFAULT_LAYER;
use crate::rng::derive_seed;
use crate::samplers::SynthesisConfig;
use crate::schedules::ScheduleConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { train_per_class: 500, validation_per_class: 100, test_per_class: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV of real images; the procedural toy set is used when absent.
    pub manifest: Option<PathBuf>,
    pub toy: ToyConfig,
    pub split: SplitFractions,
    /// Balance labels across partitions when splitting a manifest.
    pub stratify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub network: EmbeddingConfig,
    pub train: EmbedTrainConfig,
    /// Guidance scale used when materializing the synthetic training set.
    pub synthetic_omega: f64,
    /// Layer inspected by Score-CAM.
    pub cam_layer: String,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            network: EmbeddingConfig::default(),
            train: EmbedTrainConfig::default(),
            synthetic_omega: 0.75,
            cam_layer: DEFAULT_LAYER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Images per synthesis batch.
    pub chunk: usize,
    /// Strengths swept by `ablate-t0`.
    pub t0_list: Vec<f64>,
    /// Guides used for the inter-condition gap.
    pub gap_guides: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { chunk: 32, t0_list: vec![0.5, 0.6, 0.7, 0.8, 0.9], gap_guides: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub model: UNetConfig,
    pub train: DiffusionTrainConfig,
    pub embed: EmbedSection,
    pub synth: SynthesisConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            output_dir: None,
            schedule: ScheduleConfig::default(),
            model: UNetConfig::default(),
            train: DiffusionTrainConfig::default(),
            embed: EmbedSection::default(),
            synth: SynthesisConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        };
        c.propagate_seed();
        c
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_override_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl RunConfig {
    fn propagate_seed(&mut self) {
        self.train.seed = derive_seed(self.seed, "train");
        self.embed.train.seed = derive_seed(self.seed, "embed");
        self.synth.seed = derive_seed(self.seed, "synth");
    }

    /// Parses TOML text, applies `key=value` overrides (which win), and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig =
            RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` (or the defaults when `None`) with overrides applied.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// TOML form that [`Self::from_toml_str`] accepts back; derived section
    /// seeds are omitted.
    pub fn to_toml_string(&self) -> String {
        let mut bare = self.clone();
        bare.train.seed = 0;
        bare.embed.train.seed = 0;
        bare.synth.seed = 0;
        let mut table = toml::Table::try_from(&bare).expect("config serializes");
        for path in [&["train"][..], &["embed", "train"], &["synth"]] {
            let mut t = &mut table;
            for part in path {
                t = t.get_mut(*part).and_then(|v| v.as_table_mut()).expect("section present");
            }
            t.remove("seed");
        }
        toml::to_string_pretty(&table).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build().map_err(as_config)?;
        self.model.validate()?;
        self.train.validate()?;
        self.embed.network.validate()?;
        self.embed.train.validate()?;
        self.synth.validate(&schedule).map_err(as_config)?;
        let mut synthetic = self.synth.clone();
        synthetic.omega = self.embed.synthetic_omega;
        synthetic.validate(&schedule).map_err(as_config)?;
        self.data.split.validate()?;
        if self.model.resolution != self.embed.network.resolution || self.model.image_channels != self.embed.network.image_channels {
            return Err(Error::Config("model and embed.network must agree on resolution and image_channels".into()));
        }
        if !crate::embedding_classifier::LAYERS.contains(&self.embed.cam_layer.as_str()) {
            return Err(Error::Config(format!("embed.cam_layer {:?} is not a layer of the embedding network", self.embed.cam_layer)));
        }
        if self.eval.chunk == 0 || self.eval.gap_guides == 0 {
            return Err(Error::Config("eval.chunk and eval.gap_guides must be positive".into()));
        }
        for &t0 in &self.eval.t0_list {
            let mut c = self.synth.clone();
            c.t0 = t0;
            c.validate(&schedule).map_err(as_config)?;
        }
        let toy = &self.data.toy;
        if self.data.manifest.is_none() && [toy.train_per_class, toy.validation_per_class, toy.test_per_class].contains(&0) {
            return Err(Error::Config("data.toy partition sizes must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; embedded in every output.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Synthesis settings used to materialize the embedder's synthetic set.
    pub fn synthetic_set_config(&self) -> SynthesisConfig {
        SynthesisConfig { omega: self.embed.synthetic_omega, ..self.synth.clone() }
    }

    /// Train, validation and test partitions.
    pub fn load_partitions(&self) -> Result<[Vec<ImageRecord>; 3]> {
        let res = self.model.resolution;
        match &self.data.manifest {
            Some(path) => {
                let records = load_manifest(path, res)?;
                let (kept, _) = retain_magnification(records);
                let split = split_subjectwise(kept, self.data.split, derive_seed(self.seed, "split"), self.data.stratify)?;
                Ok([split.train, split.validation, split.test])
            }
            None => {
                let toy = &self.data.toy;
                let seed = derive_seed(self.seed, "toy");
                Ok([
                    generate_toy_dataset(toy.train_per_class, res, seed)?,
                    generate_toy_dataset(toy.validation_per_class, res, seed.wrapping_add(1))?,
                    generate_toy_dataset(toy.test_per_class, res, seed.wrapping_add(2))?,
                ])
            }
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::SamplerKind;

    #[test]
    fn empty_file_gives_validated_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.synth.omega, 7.5);
        assert_eq!(c.embed.synthetic_omega, 0.75);
        assert_eq!(c.synthetic_set_config().omega, 0.75);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let text = "seed = 3\n[train]\nsteps = 100\n[synth]\nt0 = 0.5\n";
        let c = RunConfig::from_toml_str(text, &["train.steps=7".into(), "synth.sampler_kind=ddim".into()]).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.synth.t0, 0.5);
        assert_eq!(c.synth.sampler_kind, SamplerKind::Ddim);
        assert_eq!(c.seed, 3);
        let c2 = RunConfig::from_toml_str(text, &["model.channels=[8, 8, 16]".into()]).unwrap();
        assert_eq!(c2.model.channels, [8, 8, 16]);
    }

    #[test]
    fn unknown_keys_and_section_seeds_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nstepz = 1\n", &[]).unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("[train]\nseed = 1\n", &[]).unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("bogus = 1\n", &[]).unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("", &["nokey".into()]).unwrap_err().is_config());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["synth.t0=1.5", "train.p_uncond=2", "embed.cam_layer=\"head\"", "eval.t0_list=[0.0]", "data.split.train=0.9"] {
            let e = RunConfig::from_toml_str("", &[o.to_string()]).unwrap_err();
            assert!(e.is_config(), "{o}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content_and_roundtrips_through_toml() {
        let a = RunConfig::default();
        for seed in 0..16 {
            let c = RunConfig::from_toml_str(&format!("seed = {seed}"), &[]).unwrap();
            assert_eq!(RunConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap(), c);
        }
        let mut b = a.clone();
        b.synth.omega = 2.0;
        b.data.manifest = Some("x/manifest.csv".into());
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_toml_str(&b.to_toml_string(), &[]).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.hash(), b.hash());
    }

    #[test]
    fn seeds_are_derived_from_the_root() {
        let a = RunConfig::from_toml_str("seed = 1", &[]).unwrap();
        let b = RunConfig::from_toml_str("seed = 2", &[]).unwrap();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.train.seed, a.synth.seed);
    }
}
