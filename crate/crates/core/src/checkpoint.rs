//! Versioned weight container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor as raw little-endian `f32`
//! in header order. The header carries free-form metadata so a file is
//! self-sufficient to rebuild the model it came from.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use condiff_nn::ParamStore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::label_mapping;
use crate::denoiser::{ConditionalUNet, DiffusionModel, TrainableDenoiser, UNetConfig};
use crate::embedding_classifier::{EmbeddingConfig, EmbeddingNet, BACKBONE};
use crate::rng::component_rng;
use crate::schedules::ScheduleConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CONDIFF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    sets: Vec<(String, Vec<TensorEntry>)>,
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

/// Serializes named parameter sets under `kind`. Returns the file's SHA-256.
pub fn write_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    metadata: &M,
    sets: &[(&str, &ParamStore<f32>)],
) -> Result<String> {
    let header = Header {
        kind: kind.to_string(),
        metadata: serde_json::to_value(metadata)?,
        sets: sets
            .iter()
            .map(|(name, store)| {
                let entries = store
                    .iter()
                    .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
                    .collect();
                (name.to_string(), entries)
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload: usize = sets.iter().map(|(_, s)| s.num_scalars()).sum();
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + 4 * payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, store) in sets {
        for (_, p) in store.iter() {
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &buf)?;
    Ok(sha256_hex(&buf))
}

/// A parsed checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub kind: String,
    pub sha256: String,
    metadata: serde_json::Value,
    sets: BTreeMap<String, Vec<(TensorEntry, Vec<f32>)>>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &bytes)
    }

    fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a condiff checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(corrupt(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let mut rest = &body[header_len..];
        let mut sets = BTreeMap::new();
        for (set_name, entries) in header.sets {
            let mut tensors = Vec::with_capacity(entries.len());
            for entry in entries {
                let n: usize = entry.shape.iter().product();
                if rest.len() < 4 * n {
                    return Err(corrupt(path, format!("truncated tensor {set_name}/{}", entry.name)));
                }
                let data = rest[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                rest = &rest[4 * n..];
                tensors.push((entry, data));
            }
            sets.insert(set_name, tensors);
        }
        if !rest.is_empty() {
            return Err(corrupt(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { path: path.to_path_buf(), kind: header.kind, sha256: sha256_hex(bytes), metadata: header.metadata, sets })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(corrupt(&self.path, format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn metadata<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone()).map_err(|e| corrupt(&self.path, format!("bad metadata: {e}")))
    }

    pub fn has_set(&self, name: &str) -> bool {
        self.sets.contains_key(name)
    }

    /// Overwrites `store` with the tensors of set `name`.
    pub fn load_into(&self, name: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let tensors = self.sets.get(name).ok_or_else(|| corrupt(&self.path, format!("missing parameter set {name}")))?;
        store
            .load_named(tensors.iter().map(|(e, d)| (e.name.as_str(), e.shape.as_slice(), d.clone())))
            .map_err(|e| corrupt(&self.path, e.to_string()))
    }
}

pub const DIFFUSION_KIND: &str = "diffusion";

/// Everything needed to rebuild a trained denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCheckpointMeta {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub labels: BTreeMap<String, usize>,
    /// Optimizer steps taken when the file was written.
    pub step: usize,
    pub config_hash: String,
}

impl DiffusionCheckpointMeta {
    pub fn new(unet: UNetConfig, schedule: ScheduleConfig, step: usize, config_hash: String) -> Self {
        Self { unet, schedule, labels: label_mapping(), step, config_hash }
    }
}

/// Stores raw weights as `params` and, when given, the EMA weights as `ema`.
pub fn save_diffusion(
    path: &Path,
    meta: &DiffusionCheckpointMeta,
    params: &ParamStore<f32>,
    ema: Option<&ParamStore<f32>>,
) -> Result<String> {
    let mut sets = vec![("params", params)];
    if let Some(ema) = ema {
        sets.push(("ema", ema));
    }
    write_checkpoint(path, DIFFUSION_KIND, meta, &sets)
}

/// Rebuilds the denoiser; sampling uses the EMA weights when present.
pub fn load_diffusion(path: &Path) -> Result<(DiffusionModel, DiffusionCheckpointMeta, String)> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.expect_kind(DIFFUSION_KIND)?;
    let meta: DiffusionCheckpointMeta = ckpt.metadata()?;
    if meta.labels != label_mapping() {
        return Err(corrupt(path, format!("label mapping {:?} does not match this build", meta.labels)));
    }
    let mut net = ConditionalUNet::<f32>::new(meta.unet.clone(), meta.schedule.t_train, &mut component_rng(0, "load"))?;
    ckpt.load_into("params", net.params_mut())?;
    let mut model = DiffusionModel::new(net);
    if ckpt.has_set("ema") {
        ckpt.load_into("ema", &mut model.sampling_params)?;
    }
    Ok((model, meta, ckpt.sha256))
}

pub const EMBEDDER_KIND: &str = "embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderCheckpointMeta {
    pub network: EmbeddingConfig,
    pub backbone: String,
    pub labels: BTreeMap<String, usize>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub config_hash: String,
}

impl EmbedderCheckpointMeta {
    pub fn new(network: EmbeddingConfig, best_epoch: usize, config_hash: String) -> Self {
        Self { network, backbone: BACKBONE.to_string(), labels: label_mapping(), best_epoch, config_hash }
    }
}

pub fn save_embedder(path: &Path, meta: &EmbedderCheckpointMeta, params: &ParamStore<f32>) -> Result<String> {
    write_checkpoint(path, EMBEDDER_KIND, meta, &[("params", params)])
}

pub fn load_embedder(path: &Path) -> Result<(EmbeddingNet<f32>, EmbedderCheckpointMeta, String)> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.expect_kind(EMBEDDER_KIND)?;
    let meta: EmbedderCheckpointMeta = ckpt.metadata()?;
    if meta.backbone != BACKBONE {
        return Err(corrupt(path, format!("unknown backbone {:?}", meta.backbone)));
    }
    if meta.labels != label_mapping() {
        return Err(corrupt(path, format!("label mapping {:?} does not match this build", meta.labels)));
    }
    let mut net = EmbeddingNet::<f32>::new(meta.network.clone(), &mut component_rng(0, "load"))?;
    ckpt.load_into("params", net.params_mut())?;
    Ok((net, meta, ckpt.sha256))
}
