//! Direct same-padded stride-1 convolution over NHWC buffers.
//!
//! Outputs are computed in register blocks of 8 output channels by up to 8
//! neighbouring pixels, which avoids materializing im2col matrices. On x86-64
//! with AVX2 and FMA the kernels are compiled for those features and selected
//! at runtime.

use crate::kernels::Nhwc;
use crate::Scalar;

const LANES: usize = 8;
const PX: usize = 8;

fn round_up(v: usize) -> usize {
    v.div_ceil(LANES) * LANES
}

/// Zero-pads both spatial dimensions by `pad` on each side.
pub fn pad_nhwc<F: Scalar>(x: &[F], d: Nhwc, pad: usize) -> Vec<F> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (d.h + 2 * pad, d.w + 2 * pad);
    let mut out = vec![F::zero(); d.n * hp * wp * d.c];
    let row = d.w * d.c;
    for b in 0..d.n {
        for y in 0..d.h {
            let src = (b * d.h + y) * row;
            let dst = ((b * hp + y + pad) * wp + pad) * d.c;
            out[dst..dst + row].copy_from_slice(&x[src..src + row]);
        }
    }
    out
}

/// Copies a `(rows, cols)` matrix into `(rows, round_up(cols))`, zero-filling.
fn pad_cols<F: Scalar>(m: &[F], rows: usize, cols: usize) -> Vec<F> {
    let cp = round_up(cols);
    let mut out = vec![F::zero(); rows * cp];
    for r in 0..rows {
        out[r * cp..r * cp + cols].copy_from_slice(&m[r * cols..(r + 1) * cols]);
    }
    out
}

struct FwdArgs<'a, F> {
    xp: &'a [F],
    d: Nhwc,
    k: usize,
    w: &'a [F],
    bias: &'a [F],
    c_out: usize,
    out: &'a mut [F],
}

struct WgradArgs<'a, F> {
    xp: &'a [F],
    g: &'a [F],
    d: Nhwc,
    k: usize,
    c_out: usize,
    dw: &'a mut [F],
}

fn fwd_generic<F: Scalar>(a: &mut FwdArgs<'_, F>) {
    let d = a.d;
    let (hp, wp) = (d.h + a.k - 1, d.w + a.k - 1);
    let cp = round_up(a.c_out);
    let mut acc = vec![F::zero(); cp];
    for b in 0..d.n {
        for oy in 0..d.h {
            for ox in 0..d.w {
                acc.copy_from_slice(a.bias);
                for ky in 0..a.k {
                    for kx in 0..a.k {
                        let xbase = ((b * hp + oy + ky) * wp + ox + kx) * d.c;
                        for ci in 0..d.c {
                            let xv = a.xp[xbase + ci];
                            let wr = &a.w[((ky * a.k + kx) * d.c + ci) * cp..][..cp];
                            for (o, &wv) in acc.iter_mut().zip(wr) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                let o = ((b * d.h + oy) * d.w + ox) * a.c_out;
                a.out[o..o + a.c_out].copy_from_slice(&acc[..a.c_out]);
            }
        }
    }
}

fn wgrad_generic<F: Scalar>(a: &mut WgradArgs<'_, F>) {
    let d = a.d;
    let (hp, wp) = (d.h + a.k - 1, d.w + a.k - 1);
    let cp = round_up(a.c_out);
    for b in 0..d.n {
        for oy in 0..d.h {
            for ox in 0..d.w {
                let gr = &a.g[((b * d.h + oy) * d.w + ox) * cp..][..cp];
                for ky in 0..a.k {
                    for kx in 0..a.k {
                        let xbase = ((b * hp + oy + ky) * wp + ox + kx) * d.c;
                        for ci in 0..d.c {
                            let xv = a.xp[xbase + ci];
                            let row = &mut a.dw[((ky * a.k + kx) * d.c + ci) * cp..][..cp];
                            for (o, &gv) in row.iter_mut().zip(gr) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reinterprets a slice of `F` as `f32` when `F` is `f32`.
fn as_f32<F: Scalar>(x: &[F]) -> Option<&[f32]> {
    (std::any::TypeId::of::<F>() == std::any::TypeId::of::<f32>())
        // SAFETY: F is f32, so layout and length are identical.
        .then(|| unsafe { std::slice::from_raw_parts(x.as_ptr().cast::<f32>(), x.len()) })
}

fn as_f32_mut<F: Scalar>(x: &mut [F]) -> Option<&mut [f32]> {
    (std::any::TypeId::of::<F>() == std::any::TypeId::of::<f32>())
        // SAFETY: F is f32, so layout and length are identical.
        .then(|| unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr().cast::<f32>(), x.len()) })
}

fn has_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn run_fwd<F: Scalar>(a: &mut FwdArgs<'_, F>) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        if let (Some(xp), Some(w), Some(bias)) = (as_f32(a.xp), as_f32(a.w), as_f32(a.bias)) {
            let out = as_f32_mut(a.out).expect("same scalar type");
            let mut args = FwdArgs { xp, d: a.d, k: a.k, w, bias, c_out: a.c_out, out };
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { avx2::forward(&mut args) };
            return;
        }
    }
    fwd_generic(a)
}

fn run_wgrad<F: Scalar>(a: &mut WgradArgs<'_, F>) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        if let (Some(xp), Some(g)) = (as_f32(a.xp), as_f32(a.g)) {
            let dw = as_f32_mut(a.dw).expect("same scalar type");
            let mut args = WgradArgs { xp, g, d: a.d, k: a.k, c_out: a.c_out, dw };
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { avx2::weight_grad(&mut args) };
            return;
        }
    }
    wgrad_generic(a)
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{round_up, FwdArgs, WgradArgs, LANES, PX};

    #[inline(always)]
    unsafe fn fwd_block<const P: usize>(a: &mut FwdArgs<'_, f32>, b: usize, oy: usize, ox: usize) {
        let d = a.d;
        let (k, cin) = (a.k, d.c);
        let (hp, wp) = (d.h + k - 1, d.w + k - 1);
        let cp = round_up(a.c_out);
        debug_assert!(((b * hp + oy + k - 1) * wp + ox + k - 1 + P) * cin <= a.xp.len());
        let mut tmp = [0f32; LANES];
        for cb in (0..cp).step_by(LANES) {
            let bv = _mm256_loadu_ps(a.bias.as_ptr().add(cb));
            let mut acc = [bv; P];
            for ky in 0..k {
                for kx in 0..k {
                    let xrow = a.xp.as_ptr().add(((b * hp + oy + ky) * wp + ox + kx) * cin);
                    let wrow = a.w.as_ptr().add((ky * k + kx) * cin * cp + cb);
                    for ci in 0..cin {
                        let wv = _mm256_loadu_ps(wrow.add(ci * cp));
                        for (j, acc_j) in acc.iter_mut().enumerate() {
                            *acc_j = _mm256_fmadd_ps(_mm256_set1_ps(*xrow.add(j * cin + ci)), wv, *acc_j);
                        }
                    }
                }
            }
            let lanes = LANES.min(a.c_out - cb);
            for (j, acc_j) in acc.iter().enumerate() {
                let o = ((b * d.h + oy) * d.w + ox + j) * a.c_out + cb;
                if lanes == LANES {
                    _mm256_storeu_ps(a.out.as_mut_ptr().add(o), *acc_j);
                } else {
                    _mm256_storeu_ps(tmp.as_mut_ptr(), *acc_j);
                    a.out[o..o + lanes].copy_from_slice(&tmp[..lanes]);
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn forward(a: &mut FwdArgs<'_, f32>) {
        let d = a.d;
        for b in 0..d.n {
            for oy in 0..d.h {
                let mut ox = 0;
                while ox + PX <= d.w {
                    fwd_block::<PX>(a, b, oy, ox);
                    ox += PX;
                }
                while ox < d.w {
                    fwd_block::<1>(a, b, oy, ox);
                    ox += 1;
                }
            }
        }
    }

    /// Accumulates `CI` input channels by `CB` lane blocks over one output row.
    #[inline(always)]
    unsafe fn wgrad_tile<const CI: usize, const CB: usize>(
        a: &mut WgradArgs<'_, f32>,
        xrow: *const f32,
        grow: *const f32,
        row0: usize,
        cb: usize,
    ) {
        let (cin, cp, w) = (a.d.c, round_up(a.c_out), a.d.w);
        let dw = a.dw.as_mut_ptr();
        let mut acc = [[_mm256_setzero_ps(); CB]; CI];
        for (i, acc_i) in acc.iter_mut().enumerate() {
            for (jb, acc_ij) in acc_i.iter_mut().enumerate() {
                *acc_ij = _mm256_loadu_ps(dw.add((row0 + i) * cp + cb + jb * LANES));
            }
        }
        for ox in 0..w {
            let mut gv = [_mm256_setzero_ps(); CB];
            for (jb, g) in gv.iter_mut().enumerate() {
                *g = _mm256_loadu_ps(grow.add(ox * cp + cb + jb * LANES));
            }
            for (i, acc_i) in acc.iter_mut().enumerate() {
                let xb = _mm256_set1_ps(*xrow.add(ox * cin + i));
                for (jb, acc_ij) in acc_i.iter_mut().enumerate() {
                    *acc_ij = _mm256_fmadd_ps(xb, gv[jb], *acc_ij);
                }
            }
        }
        for (i, acc_i) in acc.iter().enumerate() {
            for (jb, acc_ij) in acc_i.iter().enumerate() {
                _mm256_storeu_ps(dw.add((row0 + i) * cp + cb + jb * LANES), *acc_ij);
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn weight_grad(a: &mut WgradArgs<'_, f32>) {
        let d = a.d;
        let (k, cin) = (a.k, d.c);
        let (hp, wp) = (d.h + k - 1, d.w + k - 1);
        let cp = round_up(a.c_out);
        for b in 0..d.n {
            for oy in 0..d.h {
                let grow = a.g.as_ptr().add((b * d.h + oy) * d.w * cp);
                for ky in 0..k {
                    for kx in 0..k {
                        let xbase = ((b * hp + oy + ky) * wp + kx) * cin;
                        let row_tap = (ky * k + kx) * cin;
                        let mut ci = 0;
                        while ci < cin {
                            let xrow = a.xp.as_ptr().add(xbase + ci);
                            let four = cin - ci >= 4;
                            let mut cb = 0;
                            while cb < cp {
                                let pair = cp - cb >= 2 * LANES;
                                match (four, pair) {
                                    (true, true) => wgrad_tile::<4, 2>(a, xrow, grow, row_tap + ci, cb),
                                    (true, false) => wgrad_tile::<4, 1>(a, xrow, grow, row_tap + ci, cb),
                                    (false, true) => wgrad_tile::<1, 2>(a, xrow, grow, row_tap + ci, cb),
                                    (false, false) => wgrad_tile::<1, 1>(a, xrow, grow, row_tap + ci, cb),
                                }
                                cb += if pair { 2 * LANES } else { LANES };
                            }
                            ci += if four { 4 } else { 1 };
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded convolution of `x` with `w` laid out `(k·k·c_in, c_out)`,
/// plus an optional bias. Returns the NHWC output with `c_out` channels.
pub fn conv_forward<F: Scalar>(x: &[F], d: Nhwc, w: &[F], bias: Option<&[F]>, c_out: usize, k: usize) -> Vec<F> {
    assert!(k % 2 == 1, "odd kernel sizes only");
    assert_eq!(w.len(), k * k * d.c * c_out);
    let xp = pad_nhwc(x, d, k / 2);
    let wp = pad_cols(w, k * k * d.c, c_out);
    let mut bp = vec![F::zero(); round_up(c_out)];
    if let Some(b) = bias {
        bp[..c_out].copy_from_slice(b);
    }
    let mut out = vec![F::zero(); d.pixels() * c_out];
    run_fwd(&mut FwdArgs { xp: &xp, d, k, w: &wp, bias: &bp, c_out, out: &mut out });
    out
}

/// Gradient with respect to the input of [`conv_forward`]: a same-padded
/// convolution of `g` with the spatially flipped, transposed kernel.
pub fn conv_input_grad<F: Scalar>(g: &[F], d: Nhwc, w: &[F], c_out: usize, k: usize) -> Vec<F> {
    let taps = k * k;
    let cin = d.c;
    let mut wt = vec![F::zero(); taps * c_out * cin];
    for t in 0..taps {
        for ci in 0..cin {
            for o in 0..c_out {
                wt[((taps - 1 - t) * c_out + o) * cin + ci] = w[(t * cin + ci) * c_out + o];
            }
        }
    }
    let dg = Nhwc { c: c_out, ..d };
    conv_forward(g, dg, &wt, None, cin, k)
}

/// Gradient with respect to the `(k·k·c_in, c_out)` kernel of [`conv_forward`].
pub fn conv_weight_grad<F: Scalar>(x: &[F], d: Nhwc, g: &[F], c_out: usize, k: usize) -> Vec<F> {
    let xp = pad_nhwc(x, d, k / 2);
    let gp = pad_cols(g, d.pixels(), c_out);
    let rows = k * k * d.c;
    let mut dw = vec![F::zero(); rows * round_up(c_out)];
    run_wgrad(&mut WgradArgs { xp: &xp, g: &gp, d, k, c_out, dw: &mut dw });
    if round_up(c_out) == c_out {
        return dw;
    }
    let cp = round_up(c_out);
    (0..rows).flat_map(|r| dw[r * cp..r * cp + c_out].to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::im2col;
    use ndarray::ArrayView2;

    fn data(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    fn reference(x: &[f64], d: Nhwc, w: &[f64], c_out: usize, k: usize) -> Vec<f64> {
        let col = im2col(x, d, k);
        let wv = ArrayView2::from_shape((k * k * d.c, c_out), w).unwrap();
        col.dot(&wv).into_raw_vec_and_offset().0
    }

    #[test]
    fn matches_im2col_reference() {
        for &(n, h, w, c, co, k) in &[(2, 5, 11, 3, 5, 3), (1, 8, 8, 16, 16, 3), (2, 4, 9, 7, 9, 1), (1, 3, 3, 2, 17, 5)] {
            let d = Nhwc { n, h, w, c };
            let x = data(d.len(), 1);
            let wt = data(k * k * c * co, 7);
            let got = conv_forward(&x, d, &wt, None, co, k);
            let want = reference(&x, d, &wt, co, k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "forward {a} vs {b}");
            }
            // Adjointness: <conv(x), g> = <x, conv_input_grad(g)> = <w, conv_weight_grad(x, g)>.
            let g = data(d.pixels() * co, 3);
            let lhs: f64 = got.iter().zip(&g).map(|(a, b)| a * b).sum();
            let dx = conv_input_grad(&g, d, &wt, co, k);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let dw = conv_weight_grad(&x, d, &g, co, k);
            let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn single_precision_path_matches_double() {
        for &(n, h, w, c, co, k) in &[(2, 5, 11, 3, 5, 3), (1, 8, 16, 16, 24, 3), (1, 4, 9, 6, 16, 1), (2, 6, 10, 9, 3, 3)] {
            let d = Nhwc { n, h, w, c };
            let x = data(d.len(), 5);
            let wt = data(k * k * c * co, 11);
            let g = data(d.pixels() * co, 13);
            let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            let close = |a: &[f32], b: &[f64]| {
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert!((*x as f64 - y).abs() < 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
                }
            };
            close(&conv_forward(&f(&x), d, &f(&wt), None, co, k), &conv_forward(&x, d, &wt, None, co, k));
            close(&conv_input_grad(&f(&g), d, &f(&wt), co, k), &conv_input_grad(&g, d, &wt, co, k));
            close(&conv_weight_grad(&f(&x), d, &f(&g), co, k), &conv_weight_grad(&x, d, &g, co, k));
        }
    }
}
