//! Records, manifest I/O, subject-wise splitting and the procedural toy dataset.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::component_rng;
use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["image_path", "label", "subject_id", "magnification"];

/// The retained magnification level when the metadata is present.
pub const KEPT_MAGNIFICATION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoInfection = 0,
    Infection = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NoInfection, Label::Infection];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoInfection => "no_infection",
            Label::Infection => "infection",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::NoInfection => Label::Infection,
            Label::Infection => Label::NoInfection,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "no_infection" | "0" => Ok(Label::NoInfection),
            "infection" | "1" => Ok(Label::Infection),
            other => Err(format!("unknown label `{other}` (expected no_infection or infection)")),
        }
    }
}

/// The label-string mapping embedded in every artifact.
pub fn label_mapping() -> BTreeMap<String, usize> {
    Label::ALL.iter().map(|l| (l.as_str().to_string(), l.index())).collect()
}

/// One image, HWC in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: Array3<f32>,
    pub label: Label,
    pub subject_id: String,
    pub magnification: Option<u8>,
}

impl ImageRecord {
    pub fn resolution(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Stacks HWC images into one NHWC batch.
pub fn stack_images<'a, I>(images: I) -> Result<Array4<f32>>
where
    I: IntoIterator<Item = &'a Array3<f32>>,
{
    let views: Vec<_> = images.into_iter().map(|a| a.view()).collect();
    if views.is_empty() {
        return Err(Error::InvalidInput("cannot stack an empty image list".into()));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn unstack_images(batch: &Array4<f32>) -> Vec<Array3<f32>> {
    batch.axis_iter(Axis(0)).map(|v| v.to_owned()).collect()
}

fn to_unit_range(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decodes an image file to HWC `[-1, 1]` at `resolution × resolution`.
pub fn load_image(path: &Path, resolution: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let rgb = img
        .resize_exact(resolution as u32, resolution as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    Ok(Array3::from_shape_fn((resolution, resolution, 3), |(y, x, c)| {
        to_unit_range(rgb.get_pixel(x as u32, y as u32)[c])
    }))
}

pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c| to_u8(image[[y as usize, x as usize, c]]);
        image::Rgb([p(0), p(1), p(2)])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_path: String,
    label: String,
    subject_id: String,
    magnification: Option<String>,
}

/// Reads a manifest CSV; image paths resolve relative to the manifest's directory.
/// Records keep manifest order. Row numbers in errors count data rows from 1.
pub fn load_manifest(path: &Path, resolution: usize) -> Result<Vec<ImageRecord>> {
    let mut reader = crate::output::csv_reader(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 0,
            message: format!("header must be `{}`, found `{}`", MANIFEST_HEADER.join(","), header.join(",")),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Manifest { row: row_no, message: e.to_string() })?;
        let label = row.label.parse::<Label>().map_err(|message| Error::Manifest { row: row_no, message })?;
        if row.subject_id.trim().is_empty() {
            return Err(Error::Manifest { row: row_no, message: "empty subject_id".into() });
        }
        let magnification = match row.magnification.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(m) => Some(m.parse::<u8>().map_err(|_| Error::Manifest {
                row: row_no,
                message: format!("magnification `{m}` is not a small integer"),
            })?),
        };
        let img_path = base.join(row.image_path.trim());
        if !img_path.is_file() {
            return Err(Error::Manifest { row: row_no, message: format!("missing image file {}", img_path.display()) });
        }
        let image = load_image(&img_path, resolution)
            .map_err(|e| Error::Manifest { row: row_no, message: e.to_string() })?;
        out.push(ImageRecord {
            id: row.image_path.trim().to_string(),
            image,
            label,
            subject_id: row.subject_id.trim().to_string(),
            magnification,
        });
    }
    Ok(out)
}

/// SHA-256 over every record's id, label, subject and pixel values.
pub fn dataset_hash(records: &[ImageRecord]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for r in records {
        for field in [r.id.as_str(), r.label.as_str(), r.subject_id.as_str()] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        h.update((r.image.len() as u64).to_le_bytes());
        for v in r.image.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes each record as `images/<id>.png` under `dir` plus `manifest.csv`,
/// optionally opening with a comment line. Returns the manifest path.
pub fn export_manifest(records: &[ImageRecord], dir: &Path, comment: Option<&str>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("images/{}.png", sanitize(&r.id));
        save_image(&dir.join(&rel), &r.image)?;
        let mag = r.magnification.map(|m| m.to_string()).unwrap_or_default();
        rows.push([rel, r.label.as_str().to_string(), r.subject_id.clone(), mag]);
    }
    let manifest = dir.join("manifest.csv");
    crate::output::write_csv(&manifest, comment, &MANIFEST_HEADER, rows)?;
    Ok(manifest)
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Outcome of magnification filtering.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MagnificationReport {
    pub metadata_present: bool,
    pub dropped_records: usize,
    /// Subjects with no level-2 record at all; they leave the dataset.
    pub dropped_subjects: Vec<String>,
}

/// Keeps only magnification-2 records when any record carries magnification
/// metadata; otherwise returns the input unchanged.
pub fn retain_magnification(records: Vec<ImageRecord>) -> (Vec<ImageRecord>, MagnificationReport) {
    if records.iter().all(|r| r.magnification.is_none()) {
        return (records, MagnificationReport::default());
    }
    let total = records.len();
    let all_subjects: Vec<String> = unique_in_order(records.iter().map(|r| r.subject_id.clone()));
    let kept: Vec<ImageRecord> =
        records.into_iter().filter(|r| r.magnification == Some(KEPT_MAGNIFICATION)).collect();
    let kept_subjects: std::collections::HashSet<&str> = kept.iter().map(|r| r.subject_id.as_str()).collect();
    let dropped_subjects = all_subjects.into_iter().filter(|s| !kept_subjects.contains(s.as_str())).collect();
    let report = MagnificationReport { metadata_present: true, dropped_records: total - kept.len(), dropped_subjects };
    (kept, report)
}

fn unique_in_order<I: IntoIterator<Item = String>>(items: I) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.65, validation: 0.15, test: 0.20 }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {f:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub stratified: bool,
    pub subjects: [usize; 3],
    pub records: [usize; 3],
    pub records_per_label: [[usize; 2]; 3],
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub report: SplitReport,
}

impl DatasetSplit {
    pub fn partitions(&self) -> [&[ImageRecord]; 3] {
        [&self.train, &self.validation, &self.test]
    }
}

/// Integer quotas summing to `total`, allocated by largest remainder.
fn quotas(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * total as f64);
    let mut q = raw.map(|r| r.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = total - q.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q
}

/// Greedy record-count balancing: each subject (in shuffled order) goes to
/// the partition furthest below its quota. Once the remaining subjects are
/// only just enough to fill still-empty partitions, they are forced there.
fn assign_greedy(subjects: &[(String, usize)], fractions: [f64; 3]) -> Vec<usize> {
    let total: usize = subjects.iter().map(|s| s.1).sum();
    let target = quotas(total, fractions);
    let mut counts = [0usize; 3];
    let mut members = [0usize; 3];
    let mut out = Vec::with_capacity(subjects.len());
    for (i, (_, n)) in subjects.iter().enumerate() {
        let remaining = subjects.len() - i;
        let empty: Vec<usize> = (0..3).filter(|&p| members[p] == 0).collect();
        let part = if !empty.is_empty() && remaining <= empty.len() {
            empty[0]
        } else {
            (0..3)
                .max_by(|&a, &b| {
                    let da = target[a] as f64 - counts[a] as f64;
                    let db = target[b] as f64 - counts[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap()
        };
        counts[part] += n;
        members[part] += 1;
        out.push(part);
    }
    out
}

/// Subject-wise split. With `stratify`, each label's subjects are balanced
/// separately (a subject's label is the majority label of its records); this
/// needs at least three subjects per label and otherwise falls back to a
/// single pool.
pub fn split_subjectwise(
    records: Vec<ImageRecord>,
    fractions: SplitFractions,
    seed: u64,
    stratify: bool,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let mut by_subject: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(r.subject_id.clone()).or_default().push(r);
    }
    if by_subject.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "subject-wise split needs at least 3 subjects, found {}",
            by_subject.len()
        )));
    }
    let subject_label = |recs: &[ImageRecord]| {
        let inf = recs.iter().filter(|r| r.label == Label::Infection).count();
        if inf * 2 > recs.len() { Label::Infection } else { Label::NoInfection }
    };
    let mut strata: BTreeMap<Option<Label>, Vec<(String, usize)>> = BTreeMap::new();
    for (sid, recs) in &by_subject {
        strata.entry(Some(subject_label(recs))).or_default().push((sid.clone(), recs.len()));
    }
    let stratified = stratify && strata.len() == 2 && strata.values().all(|s| s.len() >= 3);
    if !stratified {
        let all = strata.into_values().flatten().collect();
        strata = BTreeMap::from([(None, all)]);
    }

    let mut rng = component_rng(seed, "split_subjectwise");
    let mut assignment: HashMap<String, usize> = HashMap::new();
    for subjects in strata.values_mut() {
        subjects.shuffle(&mut rng);
        for ((sid, _), part) in subjects.iter().zip(assign_greedy(subjects, fractions.as_array())) {
            assignment.insert(sid.clone(), part);
        }
    }

    let mut parts: [Vec<ImageRecord>; 3] = Default::default();
    let mut subjects = [0usize; 3];
    for (sid, recs) in by_subject {
        let p = assignment[&sid];
        subjects[p] += 1;
        parts[p].extend(recs);
    }
    let records_per_label = [0, 1, 2].map(|p| {
        let inf = parts[p].iter().filter(|r| r.label == Label::Infection).count();
        [parts[p].len() - inf, inf]
    });
    let report = SplitReport {
        seed,
        fractions: fractions.as_array(),
        stratified,
        subjects,
        records: [0, 1, 2].map(|p| parts[p].len()),
        records_per_label,
    };
    let [train, validation, test] = parts;
    Ok(DatasetSplit { train, validation, test, report })
}

/// Procedural stand-in for wound photographs.
///
/// Both classes show soft dark ellipses on a skin-toned background. Infection
/// images add a partly transparent red ring around the main lesion and sparse
/// yellow speckle inside it. Half of the other images carry a brownish halo
/// in the same place, so the ring's hue matters and not just its presence.
/// Each record gets its own subject id.
pub fn generate_toy_dataset(n_per_class: usize, resolution: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if n_per_class == 0 {
        return Err(Error::InvalidInput("n_per_class must be at least 1".into()));
    }
    if resolution < 16 {
        return Err(Error::InvalidInput(format!("resolution must be at least 16, got {resolution}")));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for label in Label::ALL {
            let id = format!("toy-{seed}-{i:05}-{}", label.index());
            let mut rng = component_rng(seed, &id);
            out.push(ImageRecord {
                image: render_toy(label, resolution, &mut rng),
                subject_id: format!("subject-{seed}-{i:05}-{}", label.index()),
                id,
                label,
                magnification: None,
            });
        }
    }
    Ok(out)
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    angle: f32,
}

impl Ellipse {
    /// Normalised radius: 1.0 on the boundary.
    fn radius(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        (u * u + v * v).sqrt()
    }
}

fn render_toy(label: Label, res: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let r = res as f32;
    let skin = [
        0.82 + rng.random_range(-0.06..0.06),
        0.62 + rng.random_range(-0.06..0.06),
        0.52 + rng.random_range(-0.05..0.05),
    ];
    let grad = [rng.random_range(-0.08f32..0.08), rng.random_range(-0.08f32..0.08)];
    let wound = [
        0.45 + rng.random_range(-0.08..0.08),
        0.22 + rng.random_range(-0.05..0.05),
        0.20 + rng.random_range(-0.05..0.05),
    ];
    let n_blobs = rng.random_range(1..=3);
    let blobs: Vec<Ellipse> = (0..n_blobs)
        .map(|k| {
            let scale = if k == 0 { 1.0 } else { 0.5 };
            Ellipse {
                cx: r * rng.random_range(0.35..0.65),
                cy: r * rng.random_range(0.35..0.65),
                rx: r * scale * rng.random_range(0.12..0.22),
                ry: r * scale * rng.random_range(0.10..0.20),
                angle: rng.random_range(0.0..std::f32::consts::PI),
            }
        })
        .collect();
    let ring_width = rng.random_range(0.25f32..0.4);
    let (halo, halo_alpha) = match label {
        Label::Infection => (Some([0.90, 0.20, 0.18]), rng.random_range(0.35f32..0.75)),
        Label::NoInfection if rng.random_bool(0.5) => (Some([0.70, 0.45, 0.40]), rng.random_range(0.2f32..0.5)),
        Label::NoInfection => (None, 0.0),
    };
    let speckle_p = 0.12f32;
    let pixel_noise = Normal::new(0.0f32, 0.03).unwrap();

    let mut img = Array3::<f32>::zeros((res, res, 3));
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let shade = 1.0 + grad[0] * (fx / r - 0.5) + grad[1] * (fy / r - 0.5);
            let mut px = skin.map(|v| v * shade);
            for b in &blobs {
                let w = 1.0 - smoothstep(0.8, 1.05, b.radius(fx, fy));
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + wound[c] * w;
                }
            }
            let d = blobs[0].radius(fx, fy);
            if let Some(tone) = halo {
                let ring = halo_alpha * smoothstep(1.0, 1.1, d) * (1.0 - smoothstep(1.1 + ring_width, 1.2 + ring_width, d));
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - ring) + tone[c] * ring;
                }
            }
            if label == Label::Infection && d < 1.0 && rng.random::<f32>() < speckle_p {
                let yellow = [0.95, 0.85, 0.35];
                let a = rng.random_range(0.3f32..0.7);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + yellow[c] * a;
                }
            }
            for c in 0..3 {
                let v = px[c] + pixel_noise.sample(rng);
                img[[y, x, c]] = (v.clamp(0.0, 1.0) * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    img
}
