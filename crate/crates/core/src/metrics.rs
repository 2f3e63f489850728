//! Classification metrics, Fréchet distance, Inception-style score and
//! silhouette score.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::{Error, Result};

/// Binary confusion counts with `infection` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (Label::Infection, Label::Infection) => c.tp += 1,
                (Label::NoInfection, Label::Infection) => c.fp += 1,
                (Label::NoInfection, Label::NoInfection) => c.tn += 1,
                (Label::Infection, Label::NoInfection) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// A metric value that is `None` when its denominator is zero. Serializes as
/// a number or the string `"undefined"`.
pub mod undefined_or_number {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "undefined" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    #[serde(with = "undefined_or_number")]
    pub accuracy: Option<f64>,
    #[serde(with = "undefined_or_number")]
    pub sensitivity: Option<f64>,
    #[serde(with = "undefined_or_number")]
    pub specificity: Option<f64>,
    #[serde(with = "undefined_or_number")]
    pub ppv: Option<f64>,
    #[serde(with = "undefined_or_number")]
    pub f1: Option<f64>,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: ConfusionCounts) -> ClassificationMetrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let ppv = ratio(c.tp, c.tp + c.fp);
    let f1 = match (ppv, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        ppv,
        f1,
        counts: c,
    }
}

/// Maps an image batch to feature vectors for FID-style comparisons.
pub trait FeatureExtractor {
    fn descriptor(&self) -> String;
    fn features(&self, images: &Array4<f32>) -> Result<Array2<f64>>;
}

fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Sample mean and unbiased covariance of the rows of `x`.
fn mean_cov(x: ArrayView2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let centered = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Eigenvalues of a symmetric matrix after clamping tiny negatives to 0.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * scale {
                return Err(Error::Numerical(format!("covariance product has eigenvalue {v}")));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})` between Gaussian fits of
/// two feature sets (rows are samples). The trace of the square root is
/// computed as `Tr((√Σ_a Σ_b √Σ_a)^{1/2})`, which is symmetric.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidInput("Fréchet distance needs at least 2 samples per set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature dimensions {} vs {}", a.ncols(), b.ncols())));
    }
    check_finite(a, "features_a")?;
    check_finite(b, "features_b")?;
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let ea = psd_eigen(ca.clone())?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cb * &sqrt_a;
    let tr_sqrt: f64 = psd_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// `exp(mean_n KL(p(y|x_n) ‖ p(y)))` with `p(y)` the mean row.
pub fn inception_style_score(probs: ArrayView2<f64>) -> Result<f64> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::InvalidInput("empty probability matrix".into()));
    }
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let marginal = probs.mean_axis(Axis(0)).expect("non-empty");
    let mean_kl = probs
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(marginal.iter())
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.nrows() as f64;
    Ok(mean_kl.max(0.0).exp())
}

/// Softmax over negative squared distances to class centroids, a desk-scale
/// stand-in for classifier posteriors.
pub fn centroid_class_probabilities(
    features: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
    temperature: f64,
) -> Result<Array2<f64>> {
    if features.ncols() != centroids.ncols() {
        return Err(Error::Shape("feature and centroid dimensions differ".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let mut out = Array2::zeros((features.nrows(), centroids.nrows()));
    for (i, f) in features.axis_iter(Axis(0)).enumerate() {
        let logits: Vec<f64> = centroids
            .axis_iter(Axis(0))
            .map(|c| -f.iter().zip(c.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / temperature)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            out[[i, j]] = (l - m).exp() / z;
        }
    }
    Ok(out)
}

/// Mean silhouette over all points with Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette_score(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} points with {} labels", labels.len())));
    }
    check_finite(x, "embeddings")?;
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let slot = |l: usize| clusters.binary_search(&l).expect("present");
    let sizes = labels.iter().fold(vec![0usize; clusters.len()], |mut acc, &l| {
        acc[slot(l)] += 1;
        acc
    });
    let mut total = 0.0;
    for i in 0..n {
        let own = slot(labels[i]);
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; clusters.len()];
        for j in 0..n {
            if i != j {
                let d: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
                sums[slot(labels[j])] += d.sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_example() {
        let m = classification_metrics(ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 });
        assert!((m.accuracy.unwrap() - 0.7).abs() < 1e-12);
        assert!((m.sensitivity.unwrap() - 0.6).abs() < 1e-12);
        assert!((m.specificity.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.ppv.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_serializes_as_string() {
        let m = classification_metrics(ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 0 });
        assert_eq!(m.ppv, None);
        assert_eq!(m.sensitivity, None);
        let json = serde_json::to_value(m).unwrap();
        assert_eq!(json["ppv"], "undefined");
        assert_eq!(json["specificity"], 1.0);
        let back: ClassificationMetrics = serde_json::from_value(json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn counts_from_predictions() {
        use Label::*;
        let c = ConfusionCounts::from_predictions(
            &[Infection, Infection, NoInfection, NoInfection],
            &[Infection, NoInfection, Infection, NoInfection],
        )
        .unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = array![[0.0, 1.0], [2.0, 0.5], [1.0, -1.0], [0.3, 0.3]];
        let b = array![[1.0, 1.0], [0.0, 0.5], [3.0, -2.0]];
        assert!(frechet_distance(a.view(), a.view()).unwrap() < 1e-6);
        let ab = frechet_distance(a.view(), b.view()).unwrap();
        let ba = frechet_distance(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(frechet_distance(a.view(), array![[1.0]].view()).is_err());
        assert!(frechet_distance(a.view(), array![[1.0], [2.0]].view()).is_err());
    }

    #[test]
    fn inception_score_examples() {
        let same = array![[0.25, 0.75], [0.25, 0.75], [0.25, 0.75]];
        assert!((inception_style_score(same.view()).unwrap() - 1.0).abs() < 1e-12);
        let split = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((inception_style_score(split.view()).unwrap() - 2.0).abs() < 1e-12);
        assert!(inception_style_score(array![[0.5, 0.6]].view()).is_err());
    }

    #[test]
    fn silhouette_examples() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = silhouette_score(x.view(), &[0, 0, 1, 1]).unwrap();
        // a = 1, b = (10 + √101)/2 for every point.
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
        assert!(s > 0.9);
        let same = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        assert!(silhouette_score(same.view(), &[0, 1, 0, 1]).unwrap() <= 0.0);
        assert!(silhouette_score(x.view(), &[0, 0, 0, 0]).is_err());
        let single = silhouette_score(array![[0.0], [1.0], [5.0]].view(), &[0, 0, 1]).unwrap();
        assert!((-1.0..=1.0).contains(&single));
    }

    #[test]
    fn centroid_probabilities_are_rows() {
        let f = array![[0.0, 0.0], [1.0, 1.0]];
        let c = array![[0.0, 0.0], [1.0, 1.0]];
        let p = centroid_class_probabilities(f.view(), c.view(), 0.5).unwrap();
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(p[[0, 0]] > p[[0, 1]]);
    }
}
