use ndarray::{ArrayD, IxDyn};

use crate::{NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from `(name, shape, data)` triples. Every parameter
    /// must be supplied exactly once with a matching shape.
    pub fn load_named<'a, I>(&mut self, entries: I) -> Result<(), NnError>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], Vec<F>)>,
    {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, data) in entries {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
            if self.params[idx].value.shape() != shape {
                return Err(NnError::Shape(format!(
                    "param {name}: stored shape {shape:?}, model expects {:?}",
                    self.params[idx].value.shape()
                )));
            }
            self.params[idx].value = ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| NnError::Shape(format!("param {name}: {e}")))?;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(NnError::MissingParam(self.params[missing].name.clone()));
        }
        Ok(())
    }

    /// Copies every value from `other`, which must share this store's layout.
    pub fn copy_from(&mut self, other: &ParamStore<F>) {
        assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.assign(&src.value);
        }
    }
}

/// Exponential moving average of a parameter store, with the usual warmup
/// `min(decay, (1 + n) / (10 + n))` so early averages are not dominated by the
/// initialization.
#[derive(Debug, Clone)]
pub struct Ema<F> {
    pub shadow: ParamStore<F>,
    decay: f64,
    updates: u64,
}

impl<F: Scalar> Ema<F> {
    pub fn new(source: &ParamStore<F>, decay: f64) -> Self {
        Self { shadow: source.clone(), decay, updates: 0 }
    }

    pub fn update(&mut self, source: &ParamStore<F>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        let keep = F::from_f64_lossy(d);
        let take = F::from_f64_lossy(1.0 - d);
        for (dst, src) in self.shadow.params.iter_mut().zip(&source.params) {
            dst.value.zip_mut_with(&src.value, |a, &b| *a = *a * keep + b * take);
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}
