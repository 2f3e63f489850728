//! Score-CAM heatmaps: which regions of a synthesis the embedding model finds
//! similar to the guide image.

use condiff_nn::kernels::bilinear_resize;
use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding_classifier::EmbeddingNet;
use crate::{Error, Result};

/// Layer used when none is configured: the encoder's last convolution.
pub const DEFAULT_LAYER: &str = "stage3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCamResult {
    pub layer: String,
    /// Nonnegative `H×W` map at input resolution.
    #[serde(skip)]
    pub heatmap: Array2<f64>,
    /// Softmax weights over channels; they sum to one.
    pub alpha: Vec<f64>,
    /// Cosine similarity between the guide embedding and each masked synthesis.
    pub similarity: Vec<f64>,
}

/// Min-max normalizes each channel of `(h, w, K)` activations and resizes
/// it bilinearly to `out_h×out_w`. A spatially constant channel maps to zeros.
pub fn normalized_masks(activations: &Array3<f64>, out_h: usize, out_w: usize) -> Vec<Array2<f64>> {
    let (h, w, k) = activations.dim();
    (0..k)
        .map(|c| {
            let a = activations.index_axis(Axis(2), c);
            let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            let norm: Vec<f64> =
                a.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
            let up = bilinear_resize(&norm, h, w, out_h, out_w);
            Array2::from_shape_vec((out_h, out_w), up).unwrap()
        })
        .collect()
}

/// Applies `mask` identically to every color channel.
pub fn apply_mask(image: &Array3<f32>, mask: &Array2<f64>) -> Array3<f32> {
    Array3::from_shape_fn(image.dim(), |(y, x, c)| (mask[[y, x]] * image[[y, x, c]] as f64) as f32)
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let denom = (a.dot(&a) * b.dot(&b)).sqrt();
    if denom > 0.0 {
        a.dot(&b) / denom
    } else {
        0.0
    }
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `ReLU(Σ_k α^k M^k)`.
pub fn combine_masks(masks: &[Array2<f64>], alpha: &[f64]) -> Array2<f64> {
    let mut h = Array2::zeros(masks[0].dim());
    for (m, &a) in masks.iter().zip(alpha) {
        h.scaled_add(a, m);
    }
    h.mapv_inplace(|v| v.max(0.0));
    h
}

/// Score-CAM of `synthesis` against `guide` at `layer` of the embedding network.
pub fn score_cam(model: &EmbeddingNet<f32>, guide: &Array3<f32>, synthesis: &Array3<f32>, layer: &str) -> Result<ScoreCamResult> {
    if guide.dim() != synthesis.dim() {
        return Err(Error::Shape(format!("guide {:?} and synthesis {:?} differ in shape", guide.dim(), synthesis.dim())));
    }
    let (h, w, _) = synthesis.dim();
    let batch = synthesis.clone().insert_axis(Axis(0));
    let acts = model.activations(&batch, layer)?.index_axis_move(Axis(0), 0);
    if acts.shape()[0] == 0 || acts.shape()[1] == 0 || acts.shape()[2] == 0 {
        return Err(Error::InvalidInput(format!("layer {layer} has zero extent: {:?}", acts.shape())));
    }
    let masks = normalized_masks(&acts, h, w);
    let mut masked = Array4::zeros((masks.len(), h, w, synthesis.dim().2));
    for (k, m) in masks.iter().enumerate() {
        masked.index_axis_mut(Axis(0), k).assign(&apply_mask(synthesis, m));
    }
    let reference = model.embed(&guide.clone().insert_axis(Axis(0)))?;
    let emb = model.embed(&masked)?;
    let similarity: Vec<f64> = emb.rows().into_iter().map(|e| cosine(reference.row(0), e)).collect();
    let alpha = softmax(&similarity);
    let heatmap = combine_masks(&masks, &alpha);
    Ok(ScoreCamResult { layer: layer.to_string(), heatmap, alpha, similarity })
}

/// Piecewise-linear viridis colormap.
fn viridis(t: f64) -> [f64; 3] {
    #[allow(clippy::approx_constant)]
    const STOPS: [[f64; 3]; 9] = [
        [0.267, 0.005, 0.329],
        [0.283, 0.141, 0.458],
        [0.254, 0.265, 0.530],
        [0.207, 0.372, 0.553],
        [0.164, 0.471, 0.558],
        [0.128, 0.567, 0.551],
        [0.135, 0.659, 0.518],
        [0.478, 0.821, 0.318],
        [0.993, 0.906, 0.144],
    ];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

/// Blends the max-normalized heatmap over an image in `[-1, 1]` at half opacity.
pub fn render_overlay(image: &Array3<f32>, heatmap: &Array2<f64>) -> Array3<f32> {
    let max = heatmap.iter().copied().fold(0.0, f64::max);
    Array3::from_shape_fn(image.dim(), |(y, x, c)| {
        let t = if max > 0.0 { heatmap[[y, x]] / max } else { 0.0 };
        let base = (image[[y, x, c]] as f64 + 1.0) / 2.0;
        let blended = 0.5 * base + 0.5 * viridis(t)[c];
        (2.0 * blended - 1.0) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_classifier::EmbeddingConfig;
    use crate::rng::component_rng;
    use ndarray::array;

    #[test]
    fn identical_channels_give_that_map_regardless_of_weights() {
        let a = Array3::from_shape_fn((4, 4, 3), |(y, x, _)| (y * 4 + x) as f64);
        let masks = normalized_masks(&a, 4, 4);
        for alpha in [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]] {
            let h = combine_masks(&masks, &alpha);
            assert!(h.iter().zip(masks[0].iter()).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        assert_eq!(softmax(&[0.3]), vec![1.0]);
        let a = softmax(&[0.1, -0.4, 0.9]);
        let b = softmax(&[5.1, 4.6, 5.9]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn masks_lie_in_unit_interval_and_constant_channels_vanish() {
        let a = Array3::from_shape_fn((2, 2, 2), |(y, x, c)| if c == 0 { (y + 2 * x) as f64 - 1.5 } else { 4.0 });
        let m = normalized_masks(&a, 8, 8);
        assert!(m[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(m[0].iter().copied().fold(0.0, f64::max), 1.0);
        assert!(m[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_matches_hand_values() {
        assert!((cosine(array![1.0, 0.0].view(), array![1.0, 1.0].view()) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(array![0.0, 0.0].view(), array![1.0, 1.0].view()), 0.0);
    }

    #[test]
    fn score_cam_contract_on_small_model() {
        let cfg = EmbeddingConfig { channels: [4, 4, 6], dim: 8, image_channels: 3, resolution: 8 };
        let net = EmbeddingNet::<f32>::new(cfg, &mut component_rng(0, "cam")).unwrap();
        let guide = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 3 + x * 5 + c) as f32 * 0.37).sin());
        let syn = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 7 + x + 2 * c) as f32 * 0.21).cos());
        let r = score_cam(&net, &guide, &syn, DEFAULT_LAYER).unwrap();
        assert_eq!(r.alpha.len(), 6);
        assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(r.heatmap.dim(), (8, 8));
        assert!(r.heatmap.iter().all(|&v| v >= 0.0));
        assert!(score_cam(&net, &guide, &syn, "nope").is_err());
    }

    #[test]
    fn overlay_keeps_shape_and_range() {
        let img = Array3::from_elem((4, 4, 3), 0.2f32);
        let h = Array2::from_shape_fn((4, 4), |(y, x)| (y + x) as f64);
        let o = render_overlay(&img, &h);
        assert_eq!(o.dim(), img.dim());
        assert!(o.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
