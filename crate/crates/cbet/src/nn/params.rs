//! Named trainable parameters and their gradient buffers.
//!
//! Parameters live in insertion order in plain vectors; every numeric loop
//! (gradient accumulation, clipping, optimizer updates) iterates that order,
//! which keeps training bit-reproducible. The name map exists only for
//! checkpoint lookup.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable tensors of a model, with same-shaped gradient buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam { name });
        }
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Iterates (name, value) in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(S::zero());
        }
    }

    /// Adds `delta` into the gradient buffer of parameter `index`.
    pub(crate) fn accumulate_grad(&mut self, index: usize, delta: &Tensor<S>) {
        let g = &mut self.grads[index];
        debug_assert_eq!(g.shape(), delta.shape());
        for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
    }

    /// Euclidean norm over all gradient entries, accumulated in f64.
    pub fn grad_global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in &self.grads {
            for &v in g.data() {
                let v = v.as_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Same parameters at a different element precision; gradients zeroed.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.add(name, value.cast())
                .expect("names already unique in the source store");
        }
        out
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor<S>], &[Tensor<S>]) {
        (&mut self.values, &self.grads)
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[3])),
            Err(NnError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn grad_norm_accumulates_all_params() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2])).unwrap();
        let b = store.add("b", Tensor::zeros(&[1])).unwrap();
        store.accumulate_grad(a.index(), &Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
        store.accumulate_grad(b.index(), &Tensor::new(vec![1], vec![4.0]).unwrap());
        assert!((store.grad_global_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cast_preserves_names_and_order() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("a", Tensor::full(&[2], 0.5)).unwrap();
        store.add("b", Tensor::full(&[1], -1.0)).unwrap();
        let d: ParamStore<f64> = store.cast();
        let names: Vec<&str> = d.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(d.value(ParamId(0)).data(), &[0.5f64, 0.5]);
    }
}
