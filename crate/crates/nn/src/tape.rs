//! Reverse-mode autodiff tape. Every op evaluates eagerly, stores its output
//! and whatever it needs for the backward pass, and returns a [`Var`] handle.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::conv;
use crate::kernels::{self, Nhwc};
use crate::{ParamId, ParamStore, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    AddChannel(Var, Var),
    Silu { x: Var, sig: Vec<F> },
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: kernels::GroupNormStats<F> },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    L2Normalize { x: Var, norms: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Mse { pred: Var, target: ArrayD<F> },
    Triplet { a: Var, p: Var, n: Var, margin: F },
    Mean(Var),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn view2<F>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), a.as_slice().expect("tape values are contiguous"))
        .expect("element count matches")
}

fn from_vec<F>(shape: &[usize], v: Vec<F>) -> ArrayD<F> {
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("element count matches")
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    /// `x (N,H,W,C) + v (N,C)` broadcast over the spatial dims.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        assert_eq!(self.value(v).shape(), &[d.n, d.c], "add_channel: bias shape");
        let bias = self.value(v).as_slice().unwrap();
        let mut out = xs.clone();
        let o = out.as_slice_mut().unwrap();
        for n in 0..d.n {
            let b = &bias[n * d.c..(n + 1) * d.c];
            for p in 0..d.h * d.w {
                let base = (n * d.h * d.w + p) * d.c;
                for (dst, &bv) in o[base..base + d.c].iter_mut().zip(b) {
                    *dst += bv;
                }
            }
        }
        self.push(out, Op::AddChannel(x, v))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let sig = kernels::sigmoid(xs.as_slice().unwrap());
        let v: Vec<F> = xs.as_slice().unwrap().iter().zip(&sig).map(|(&z, &s)| z * s).collect();
        let v = from_vec(xs.shape(), v);
        self.push(v, Op::Silu { x, sig })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|z| z.max(F::zero()));
        self.push(v, Op::Relu(x))
    }

    /// Stride-1 same-padded convolution. `x` is NHWC, `w` is `(k·k·c_in, c_out)`, `b` is `(c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        let ws = self.value(w);
        assert_eq!(ws.shape()[0], k * k * d.c, "conv2d: weight rows vs k*k*c_in");
        let cout = ws.shape()[1];
        let wv = view2(ws, k * k * d.c, cout);
        let out = if k == 1 {
            let mut y = view2(xs, d.pixels(), d.c).dot(&wv);
            y += &self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            from_vec(&[d.n, d.h, d.w, cout], y.into_raw_vec_and_offset().0)
        } else {
            let y = conv::conv_forward(xs.as_slice().unwrap(), d, ws.as_slice().unwrap(), self.value(b).as_slice(), cout, k);
            from_vec(&[d.n, d.h, d.w, cout], y)
        };
        self.push(out, Op::Conv2d { x, w, b, k })
    }

    /// `x (N, d_in) · w (d_in, d_out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (n, din) = (xs.shape()[0], xs.shape()[1]);
        let dout = ws.shape()[1];
        let mut y = view2(xs, n, din).dot(&view2(ws, din, dout));
        y += &self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        assert!(d.c.is_multiple_of(groups), "group_norm: {} channels not divisible by {groups}", d.c);
        let stats = kernels::group_norm_stats(xs.as_slice().unwrap(), d, groups, F::from_f64_lossy(1e-5));
        let gs = self.value(gamma).as_slice().unwrap();
        let bs = self.value(beta).as_slice().unwrap();
        let mut out = stats.xhat.clone();
        for px in out.chunks_exact_mut(d.c) {
            for ((v, &g), &b) in px.iter_mut().zip(gs).zip(bs) {
                *v = *v * g + b;
            }
        }
        let out = from_vec(xs.shape(), out);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        assert!(d.h.is_multiple_of(2) && d.w.is_multiple_of(2), "avg_pool2 needs even spatial dims");
        let out = kernels::avg_pool2(xs.as_slice().unwrap(), d);
        let out = from_vec(&[d.n, d.h / 2, d.w / 2, d.c], out);
        self.push(out, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        let out = kernels::upsample2(xs.as_slice().unwrap(), d);
        let out = from_vec(&[d.n, d.h * 2, d.w * 2, d.c], out);
        self.push(out, Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.shape()[3], bv.shape()[3]);
        assert_eq!(av.shape()[..3], bv.shape()[..3], "concat_channels: spatial dims must agree");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (pa, pb) in av.as_slice().unwrap().chunks_exact(ca).zip(bv.as_slice().unwrap().chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let shape = [av.shape()[0], av.shape()[1], av.shape()[2], ca + cb];
        self.push(from_vec(&shape, out), Op::ConcatChannels(a, b))
    }

    /// NHWC → (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = Nhwc::from_shape(xs.shape());
        let out = xs
            .view()
            .into_shape_with_order((d.n, d.h * d.w, d.c))
            .unwrap()
            .mean_axis(Axis(1))
            .unwrap();
        self.push(out.into_dyn(), Op::GlobalAvgPool(x))
    }

    /// Row-wise projection onto the unit sphere.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (n, dim) = (xs.shape()[0], xs.shape()[1]);
        let eps = F::from_f64_lossy(1e-12);
        let mut out = xs.clone();
        let mut norms = Vec::with_capacity(n);
        for mut row in out.view_mut().into_shape_with_order((n, dim)).unwrap().rows_mut() {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Gathers rows of `table (V, D)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let dim = t.shape()[1];
        let tv = view2(t, t.shape()[0], dim);
        let mut out = Array2::zeros((ids.len(), dim));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id));
        }
        self.push(out.into_dyn(), Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Mean squared error against a constant target, averaged over every element.
    pub fn mse(&mut self, pred: Var, target: ArrayD<F>) -> Var {
        assert_eq!(self.value(pred).shape(), target.shape(), "mse: shape mismatch");
        let target = target.as_standard_layout().into_owned();
        let diff = self.value(pred) - &target;
        let n = F::from_usize(diff.len()).unwrap();
        let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Mse { pred, target })
    }

    /// Batch mean of `max(‖a−p‖² − ‖a−n‖² + margin, 0)` over rows of `(B, d)` inputs.
    pub fn triplet_loss(&mut self, a: Var, p: Var, n: Var, margin: F) -> Var {
        let loss = triplet_value(self.value(a), self.value(p), self.value(n), margin);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Triplet { a, p, n, margin })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.sum() / F::from_usize(xs.len()).unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(x))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads[i].take().map(|g| (id, g)),
                _ => None,
            })
            .collect();
        Gradients { params, leaves: grads }
    }

    fn backward_node(&self, node: &Node<F>, g: ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let mut acc = |v: Var, d: ArrayD<F>| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.mapv(|v| -v));
                acc(*a, g);
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::AddChannel(x, v) => {
                let d = Nhwc::from_shape(g.shape());
                let dv = g
                    .view()
                    .into_shape_with_order((d.n, d.h * d.w, d.c))
                    .unwrap()
                    .sum_axis(Axis(1));
                acc(*v, dv.into_dyn());
                acc(*x, g);
            }
            Op::Silu { x, sig } => {
                let mut d = g;
                let xs = self.value(*x).as_slice().unwrap();
                for ((gv, &z), &s) in d.as_slice_mut().unwrap().iter_mut().zip(xs).zip(sig) {
                    *gv *= s * (F::one() + z * (F::one() - s));
                }
                acc(*x, d);
            }
            Op::Relu(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |gv, &z| {
                    if z <= F::zero() {
                        *gv = F::zero()
                    }
                });
                acc(*x, d);
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = self.value(*x);
                let d = Nhwc::from_shape(xs.shape());
                let ws = self.value(*w);
                let cout = ws.shape()[1];
                let rows = k * k * d.c;
                let gy = view2(&g, d.pixels(), cout);
                acc(*b, gy.sum_axis(Axis(0)).into_dyn());
                let wv = view2(ws, rows, cout);
                if *k == 1 {
                    let xv = view2(xs, d.pixels(), d.c);
                    acc(*w, xv.t().dot(&gy).into_dyn());
                    acc(*x, from_vec(xs.shape(), gy.dot(&wv.t()).into_raw_vec_and_offset().0));
                } else {
                    let (xsl, gsl) = (xs.as_slice().unwrap(), g.as_slice().unwrap());
                    acc(*w, from_vec(&[rows, cout], conv::conv_weight_grad(xsl, d, gsl, cout, *k)));
                    let dx = conv::conv_input_grad(gsl, d, ws.as_slice().unwrap(), cout, *k);
                    acc(*x, from_vec(xs.shape(), dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, din) = (xs.shape()[0], xs.shape()[1]);
                let dout = ws.shape()[1];
                let gy = view2(&g, n, dout);
                acc(*b, gy.sum_axis(Axis(0)).into_dyn());
                acc(*w, view2(xs, n, din).t().dot(&gy).into_dyn());
                acc(*x, gy.dot(&view2(ws, din, dout).t()).into_dyn());
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let d = Nhwc::from_shape(g.shape());
                let gs = self.value(*gamma).as_slice().unwrap();
                let gv = g.as_slice().unwrap();
                let mut dgamma = vec![F::zero(); d.c];
                let mut dbeta = vec![F::zero(); d.c];
                let mut dxhat = vec![F::zero(); gv.len()];
                for ((gp, xp), dp) in gv.chunks_exact(d.c).zip(stats.xhat.chunks_exact(d.c)).zip(dxhat.chunks_exact_mut(d.c)) {
                    for c in 0..d.c {
                        dgamma[c] += gp[c] * xp[c];
                        dbeta[c] += gp[c];
                        dp[c] = gp[c] * gs[c];
                    }
                }
                acc(*gamma, from_vec(&[d.c], dgamma));
                acc(*beta, from_vec(&[d.c], dbeta));
                let dx = kernels::group_norm_backward(&dxhat, stats, d, *groups);
                acc(*x, from_vec(g.shape(), dx));
            }
            Op::AvgPool2(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = kernels::avg_pool2_backward(g.as_slice().unwrap(), Nhwc::from_shape(&shape));
                acc(*x, from_vec(&shape, dx));
            }
            Op::Upsample2(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = kernels::upsample2_backward(g.as_slice().unwrap(), Nhwc::from_shape(&shape));
                acc(*x, from_vec(&shape, dx));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (ca, cb) = (sa[3], sb[3]);
                let mut ga = Vec::with_capacity(g.len() / (ca + cb) * ca);
                let mut gb = Vec::with_capacity(g.len() / (ca + cb) * cb);
                for px in g.as_slice().unwrap().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&px[..ca]);
                    gb.extend_from_slice(&px[ca..]);
                }
                acc(*a, from_vec(&sa, ga));
                acc(*b, from_vec(&sb, gb));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let d = Nhwc::from_shape(&shape);
                let inv = F::one() / F::from_usize(d.h * d.w).unwrap();
                let gv = g.as_slice().unwrap();
                let mut dx = vec![F::zero(); d.len()];
                for n in 0..d.n {
                    for p in 0..d.h * d.w {
                        let base = (n * d.h * d.w + p) * d.c;
                        for c in 0..d.c {
                            dx[base + c] = gv[n * d.c + c] * inv;
                        }
                    }
                }
                acc(*x, from_vec(&shape, dx));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let dim = y.shape()[1];
                let yv = view2(y, norms.len(), dim);
                let gv = view2(&g, norms.len(), dim);
                let mut dx = Array2::zeros((norms.len(), dim));
                for (r, &norm) in norms.iter().enumerate() {
                    let dot = yv.row(r).dot(&gv.row(r));
                    for c in 0..dim {
                        dx[[r, c]] = (gv[[r, c]] - yv[[r, c]] * dot) / norm;
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let dim = t.shape()[1];
                let gv = view2(&g, ids.len(), dim);
                let mut dt = Array2::zeros((t.shape()[0], dim));
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &gv.row(r);
                }
                acc(*table, dt.into_dyn());
            }
            Op::Mse { pred, target } => {
                let gs = g.iter().next().copied().unwrap();
                let n = F::from_usize(target.len()).unwrap();
                let coef = gs * F::from_f64_lossy(2.0) / n;
                let d = (self.value(*pred) - target) * coef;
                acc(*pred, d);
            }
            Op::Triplet { a, p, n, margin } => {
                let gs = g.iter().next().copied().unwrap();
                let (da, dp, dn) =
                    triplet_grads(self.value(*a), self.value(*p), self.value(*n), *margin, gs);
                acc(*a, da);
                acc(*p, dp);
                acc(*n, dn);
            }
            Op::Mean(x) => {
                let xs = self.value(*x);
                let gs = g.iter().next().copied().unwrap();
                let v = gs / F::from_usize(xs.len()).unwrap();
                acc(*x, ArrayD::from_elem(xs.raw_dim(), v));
            }
        }
    }
}

fn triplet_value<F: Scalar>(a: &ArrayD<F>, p: &ArrayD<F>, n: &ArrayD<F>, margin: F) -> F {
    assert!(a.shape() == p.shape() && a.shape() == n.shape(), "triplet: shape mismatch");
    let (b, dim) = (a.shape()[0], a.shape()[1]);
    let (av, pv, nv) = (view2(a, b, dim), view2(p, b, dim), view2(n, b, dim));
    let mut total = F::zero();
    for r in 0..b {
        let dp: F = av.row(r).iter().zip(pv.row(r)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let dn: F = av.row(r).iter().zip(nv.row(r)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        total += (dp - dn + margin).max(F::zero());
    }
    total / F::from_usize(b).unwrap()
}

fn triplet_grads<F: Scalar>(
    a: &ArrayD<F>,
    p: &ArrayD<F>,
    n: &ArrayD<F>,
    margin: F,
    upstream: F,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let (b, dim) = (a.shape()[0], a.shape()[1]);
    let (av, pv, nv) = (view2(a, b, dim), view2(p, b, dim), view2(n, b, dim));
    let mut da = Array2::zeros((b, dim));
    let mut dp = Array2::zeros((b, dim));
    let mut dn = Array2::zeros((b, dim));
    let two = F::from_f64_lossy(2.0) * upstream / F::from_usize(b).unwrap();
    for r in 0..b {
        let d_ap: F = av.row(r).iter().zip(pv.row(r)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let d_an: F = av.row(r).iter().zip(nv.row(r)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        if d_ap - d_an + margin <= F::zero() {
            continue;
        }
        for c in 0..dim {
            let (x, y, z) = (av[[r, c]], pv[[r, c]], nv[[r, c]]);
            da[[r, c]] = two * (z - y);
            dp[[r, c]] = two * (y - x);
            dn[[r, c]] = two * (x - z);
        }
    }
    (da.into_dyn(), dp.into_dyn(), dn.into_dyn())
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    params: Vec<(ParamId, ArrayD<F>)>,
    leaves: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradients for every parameter that influenced the loss. A parameter
    /// recorded more than once has its contributions summed.
    pub fn params(&self) -> Vec<(ParamId, ArrayD<F>)> {
        let mut out: Vec<(ParamId, ArrayD<F>)> = Vec::new();
        for (id, g) in &self.params {
            match out.iter_mut().find(|(k, _)| k == id) {
                Some((_, acc)) => *acc += g,
                None => out.push((*id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Gradient of a constant input, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

