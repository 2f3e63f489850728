//! Raw NHWC kernels on contiguous buffers. The tape wraps these with shape
//! bookkeeping; keeping them free of graph state lets tests hit them directly.

use ndarray::Array2;

use crate::Scalar;

/// Dimensions of an NHWC activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nhwc {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Nhwc {
    pub fn from_shape(shape: &[usize]) -> Self {
        assert_eq!(shape.len(), 4, "expected NHWC shape, got {shape:?}");
        Self { n: shape[0], h: shape[1], w: shape[2], c: shape[3] }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Unfolds `k×k` same-padded patches into rows: output is `(n·h·w, k·k·c)`.
pub fn im2col<F: Scalar>(x: &[F], d: Nhwc, k: usize) -> Array2<F> {
    let pad = (k / 2) as isize;
    let row_len = k * k * d.c;
    let mut col = Array2::<F>::zeros((d.pixels(), row_len));
    let dst = col.as_slice_mut().expect("fresh array is contiguous");
    for b in 0..d.n {
        for y in 0..d.h {
            for x0 in 0..d.w {
                let row = ((b * d.h + y) * d.w + x0) * row_len;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x0 as isize + kx as isize - pad;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        let src = ((b * d.h + sy as usize) * d.w + sx as usize) * d.c;
                        let off = row + (ky * k + kx) * d.c;
                        dst[off..off + d.c].copy_from_slice(&x[src..src + d.c]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an NHWC buffer.
pub fn col2im<F: Scalar>(col: &[F], d: Nhwc, k: usize) -> Vec<F> {
    let pad = (k / 2) as isize;
    let row_len = k * k * d.c;
    let mut out = vec![F::zero(); d.len()];
    for b in 0..d.n {
        for y in 0..d.h {
            for x0 in 0..d.w {
                let row = ((b * d.h + y) * d.w + x0) * row_len;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x0 as isize + kx as isize - pad;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        let dst = ((b * d.h + sy as usize) * d.w + sx as usize) * d.c;
                        let off = row + (ky * k + kx) * d.c;
                        for (o, &g) in out[dst..dst + d.c].iter_mut().zip(&col[off..off + d.c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Normalized activations and per-(sample, group) inverse std from a group-norm forward pass.
pub struct GroupNormStats<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Per-(sample, channel) sums of `f(x, y)` over pixels, `(n, c)` row-major.
/// `shift` holds one offset per (sample, channel) subtracted from `x` first.
fn channel_sums<F: Scalar>(x: &[F], y: &[F], shift: Option<&[F]>, d: Nhwc, f: impl Fn(F, F) -> F) -> Vec<F> {
    let hwc = d.h * d.w * d.c;
    let zeros = vec![F::zero(); d.c];
    let mut sums = vec![F::zero(); d.n * d.c];
    for (b, acc) in sums.chunks_exact_mut(d.c).enumerate() {
        let m = shift.map_or(&zeros[..], |s| &s[b * d.c..(b + 1) * d.c]);
        let xs = &x[b * hwc..(b + 1) * hwc];
        let ys = &y[b * hwc..(b + 1) * hwc];
        for (xp, yp) in xs.chunks_exact(d.c).zip(ys.chunks_exact(d.c)) {
            for c in 0..d.c {
                acc[c] += f(xp[c] - m[c], yp[c]);
            }
        }
    }
    sums
}

/// Folds per-channel sums into per-group totals, broadcast back per channel.
fn group_totals<F: Scalar>(sums: &[F], d: Nhwc, groups: usize) -> Vec<F> {
    let cg = d.c / groups;
    let mut out = vec![F::zero(); sums.len()];
    for (src, dst) in sums.chunks_exact(cg).zip(out.chunks_exact_mut(cg)) {
        let t: F = src.iter().copied().sum();
        dst.fill(t);
    }
    out
}

pub fn group_norm_stats<F: Scalar>(x: &[F], d: Nhwc, groups: usize, eps: F) -> GroupNormStats<F> {
    let count = F::from_usize(d.h * d.w * (d.c / groups)).unwrap();
    let sums = channel_sums(x, x, None, d, |a, _| a);
    let mean: Vec<F> = group_totals(&sums, d, groups).iter().map(|&s| s / count).collect();
    let var = group_totals(&channel_sums(x, x, Some(&mean), d, |a, _| a * a), d, groups);
    let hwc = d.h * d.w * d.c;
    let istd: Vec<F> = var.iter().map(|&v| F::one() / (v / count + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    for (b, (src, dst)) in x.chunks_exact(hwc).zip(xhat.chunks_exact_mut(hwc)).enumerate() {
        let m = &mean[b * d.c..(b + 1) * d.c];
        let s = &istd[b * d.c..(b + 1) * d.c];
        for (sp, dp) in src.chunks_exact(d.c).zip(dst.chunks_exact_mut(d.c)) {
            for c in 0..d.c {
                dp[c] = (sp[c] - m[c]) * s[c];
            }
        }
    }
    let cg = d.c / groups;
    let inv_std = istd.iter().step_by(cg).copied().collect();
    GroupNormStats { xhat, inv_std }
}

/// Gradient w.r.t. the group-norm input given the gradient w.r.t. `xhat`.
pub fn group_norm_backward<F: Scalar>(
    dxhat: &[F],
    stats: &GroupNormStats<F>,
    d: Nhwc,
    groups: usize,
) -> Vec<F> {
    let cg = d.c / groups;
    let count = F::from_usize(d.h * d.w * cg).unwrap();
    let sum_d = group_totals(&channel_sums(dxhat, dxhat, None, d, |a, _| a), d, groups);
    let sum_dx = group_totals(&channel_sums(dxhat, &stats.xhat, None, d, |a, b| a * b), d, groups);
    let hwc = d.h * d.w * d.c;
    let mut dx = vec![F::zero(); dxhat.len()];
    for b in 0..d.n {
        let sd = &sum_d[b * d.c..(b + 1) * d.c];
        let sx = &sum_dx[b * d.c..(b + 1) * d.c];
        let scale: Vec<F> = (0..d.c).map(|c| stats.inv_std[b * groups + c / cg] / count).collect();
        let range = b * hwc..(b + 1) * hwc;
        for ((dp, gp), xp) in dx[range.clone()]
            .chunks_exact_mut(d.c)
            .zip(dxhat[range.clone()].chunks_exact(d.c))
            .zip(stats.xhat[range].chunks_exact(d.c))
        {
            for c in 0..d.c {
                dp[c] = scale[c] * (count * gp[c] - sd[c] - xp[c] * sx[c]);
            }
        }
    }
    dx
}

/// Logistic sigmoid of every element.
pub fn sigmoid<F: Scalar>(x: &[F]) -> Vec<F> {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<F>() == std::any::TypeId::of::<f32>()
        && std::is_x86_feature_detected!("avx2")
        && std::is_x86_feature_detected!("fma")
    {
        // SAFETY: F is f32, so layout and length are identical.
        let xs = unsafe { std::slice::from_raw_parts(x.as_ptr().cast::<f32>(), x.len()) };
        let mut out = vec![F::zero(); x.len()];
        // SAFETY: as above.
        let os = unsafe { std::slice::from_raw_parts_mut(out.as_mut_ptr().cast::<f32>(), out.len()) };
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { simd::sigmoid_f32(xs, os) };
        return out;
    }
    x.iter().map(|&z| F::one() / (F::one() + (-z).exp())).collect()
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Cephes-style `exp` on 8 lanes, relative error about 2e-7.
    #[inline(always)]
    unsafe fn exp256(x: __m256) -> __m256 {
        let x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(-87.3)), _mm256_set1_ps(88.3));
        let fx = _mm256_round_ps(
            _mm256_mul_ps(x, _mm256_set1_ps(std::f32::consts::LOG2_E)),
            _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC,
        );
        let r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693_359_4), x);
        let r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.121_944_4e-4), r);
        let mut y = _mm256_set1_ps(1.987_569_1e-4);
        for c in [1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 0.166_666_65, 0.5] {
            y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(c));
        }
        let y = _mm256_fmadd_ps(y, _mm256_mul_ps(r, r), _mm256_add_ps(r, _mm256_set1_ps(1.0)));
        let pow2 = _mm256_slli_epi32::<23>(_mm256_add_epi32(_mm256_cvtps_epi32(fx), _mm256_set1_epi32(127)));
        _mm256_mul_ps(y, _mm256_castsi256_ps(pow2))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn sigmoid_f32(x: &[f32], out: &mut [f32]) {
        let one = _mm256_set1_ps(1.0);
        let neg = _mm256_set1_ps(-0.0);
        let mut xc = x.chunks_exact(8);
        let mut oc = out.chunks_exact_mut(8);
        for (xs, os) in (&mut xc).zip(&mut oc) {
            let v = _mm256_loadu_ps(xs.as_ptr());
            let e = exp256(_mm256_xor_ps(v, neg));
            _mm256_storeu_ps(os.as_mut_ptr(), _mm256_div_ps(one, _mm256_add_ps(one, e)));
        }
        for (o, &z) in oc.into_remainder().iter_mut().zip(xc.remainder()) {
            *o = 1.0 / (1.0 + (-z).exp());
        }
    }
}

pub fn avg_pool2<F: Scalar>(x: &[F], d: Nhwc) -> Vec<F> {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = vec![F::zero(); d.n * oh * ow * d.c];
    for b in 0..d.n {
        for y in 0..oh {
            for x0 in 0..ow {
                let dst = ((b * oh + y) * ow + x0) * d.c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((b * d.h + 2 * y + dy) * d.w + 2 * x0 + dx) * d.c;
                    for c in 0..d.c {
                        out[dst + c] += x[src + c] * quarter;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]; `d` is the (larger) input shape.
pub fn avg_pool2_backward<F: Scalar>(g: &[F], d: Nhwc) -> Vec<F> {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = vec![F::zero(); d.len()];
    for b in 0..d.n {
        for y in 0..oh {
            for x0 in 0..ow {
                let src = ((b * oh + y) * ow + x0) * d.c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((b * d.h + 2 * y + dy) * d.w + 2 * x0 + dx) * d.c;
                    for c in 0..d.c {
                        out[dst + c] = g[src + c] * quarter;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling; `d` is the (smaller) input shape.
pub fn upsample2<F: Scalar>(x: &[F], d: Nhwc) -> Vec<F> {
    let (oh, ow) = (d.h * 2, d.w * 2);
    let mut out = vec![F::zero(); d.n * oh * ow * d.c];
    for b in 0..d.n {
        for y in 0..oh {
            for x0 in 0..ow {
                let src = ((b * d.h + y / 2) * d.w + x0 / 2) * d.c;
                let dst = ((b * oh + y) * ow + x0) * d.c;
                out[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `d` is the (smaller) input shape.
pub fn upsample2_backward<F: Scalar>(g: &[F], d: Nhwc) -> Vec<F> {
    let (oh, ow) = (d.h * 2, d.w * 2);
    let mut out = vec![F::zero(); d.len()];
    for b in 0..d.n {
        for y in 0..oh {
            for x0 in 0..ow {
                let dst = ((b * d.h + y / 2) * d.w + x0 / 2) * d.c;
                let src = ((b * oh + y) * ow + x0) * d.c;
                for c in 0..d.c {
                    out[dst + c] += g[src + c];
                }
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel `h×w` map with half-pixel centres
/// (the `align_corners = false` convention).
pub fn bilinear_resize(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - wx) + map[y0 * w + x1] * wx;
            let bot = map[y1 * w + x0] * (1.0 - wx) + map[y1 * w + x1] * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x and c.
        let d = Nhwc { n: 2, h: 3, w: 4, c: 2 };
        let x: Vec<f64> = (0..d.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let col = im2col(&x, d, 3);
        let c: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, d, 3);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let big = Nhwc { n: 1, h: 4, w: 6, c: 3 };
        let small = Nhwc { n: 1, h: 2, w: 3, c: 3 };
        let x: Vec<f64> = (0..big.len()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let g: Vec<f64> = (0..small.len()).map(|i| (i as f64).sqrt()).collect();
        let lhs: f64 = avg_pool2(&x, big).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&avg_pool2_backward(&g, big)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let lhs: f64 = upsample2(&g, small).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.iter().zip(&upsample2_backward(&x, small)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let m: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(bilinear_resize(&m, 3, 4, 3, 4), m);
        let c = vec![0.7; 4];
        assert!(bilinear_resize(&c, 2, 2, 8, 8).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn group_norm_zero_mean_unit_var() {
        let d = Nhwc { n: 2, h: 2, w: 2, c: 4 };
        let x: Vec<f64> = (0..d.len()).map(|i| (i * i) as f64 * 0.1).collect();
        let st = group_norm_stats(&x, d, 2, 0.0);
        for b in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (0..4)
                    .flat_map(|p| (0..2).map(move |c| b * 16 + p * 4 + g * 2 + c))
                    .map(|i| st.xhat[i])
                    .collect();
                let m: f64 = vals.iter().sum::<f64>() / 8.0;
                let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
                assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
            }
        }
    }
}
