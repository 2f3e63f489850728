use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{ParamId, ParamStore, Scalar, Tape, Var};

fn uniform_init<F: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Same-padded `k×k` convolution on NHWC inputs.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        assert!(k % 2 == 1, "only odd kernels are supported");
        let bound = 1.0 / ((k * k * c_in) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(&[k * k * c_in, c_out], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[c_out], bound, rng));
        Self { weight, bias, k, c_in, c_out }
    }

    /// Conv with weights and bias initialised to zero.
    pub fn zeroed<F: Scalar>(store: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[k * k * c_in, c_out])));
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
        Self { weight, bias, k, c_in, c_out }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.k)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(&[d_in, d_out], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[d_out], bound, rng));
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        let gamma = store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), F::one()));
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, groups }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Learned lookup table, one row per id.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let data = (0..rows * dim).map(|_| F::from_f64_lossy(normal.sample(rng))).collect();
        let table = store.add(format!("{name}.table"), ArrayD::from_shape_vec(IxDyn(&[rows, dim]), data).unwrap());
        Self { table, rows }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, ids: &[usize]) -> Var {
        assert!(ids.iter().all(|&i| i < self.rows), "embedding id out of range");
        let t = tape.param(store, self.table);
        tape.embedding(t, ids)
    }
}
