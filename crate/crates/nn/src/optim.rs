use ndarray::ArrayD;

use crate::{ParamId, ParamStore, Scalar};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, ArrayD<F>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - self.beta1), F::from_f64_lossy(1.0 - self.beta2));
        let step_size = F::from_f64_lossy(self.lr / bc1);
        let bc2_sqrt = F::from_f64_lossy(bc2.sqrt());
        let eps = F::from_f64_lossy(self.eps);
        let decay = F::from_f64_lossy(1.0 - self.lr * self.weight_decay);
        for (id, g) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, &g| *m = *m * b1 + g * one_b1);
            v.zip_mut_with(g, |v, &g| *v = *v * b2 + g * g * one_b2);
            let p = store.get_mut(*id);
            p.mapv_inplace(|x| x * decay);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= step_size * m / (v.sqrt() / bc2_sqrt + eps);
            });
        }
    }
}
