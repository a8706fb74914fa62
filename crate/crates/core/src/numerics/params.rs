//! Named parameter tensors with gradient accumulators.

use std::sync::atomic::{AtomicU64, Ordering};

use super::rng::Rng;
use super::tensor::Tensor;
use super::tape::Gradients;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// A group of parameters optimized together (one world model, one actor, ...).
///
/// The set carries a process-unique id so tape gradients can be routed back
/// to the set that produced them. Cloning a set gives the clone a new id.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    tensors: Vec<ParamTensor>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            tensors: self.tensors.clone(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.rows, value.cols);
        self.tensors.push(ParamTensor { name, value, grad });
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform weight matrix of shape `out × inp`.
    pub fn add_glorot(&mut self, name: impl Into<String>, out: usize, inp: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (out + inp) as f64).sqrt();
        let data = (0..out * inp).map(|_| rng.uniform(-limit, limit)).collect();
        self.add(name, Tensor::from_vec(out, inp, data))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Add the gradients routed to this set by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (index, g) in grads.param_grads(self.id) {
            self.tensors[index].grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `self ← (1 − rate)·self + rate·source`, tensor by tensor.
    pub fn mix_from(&mut self, source: &ParamSet, rate: f64) {
        assert_eq!(self.tensors.len(), source.tensors.len());
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            for (d, s) in dst.value.data.iter_mut().zip(&src.value.data) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
    }

    /// Copy values (not ids) from another set with the same layout.
    pub fn copy_values_from(&mut self, source: &ParamSet) {
        assert_eq!(self.tensors.len(), source.tensors.len());
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            assert_eq!(dst.value.shape(), src.value.shape(), "layout mismatch at {}", dst.name);
            dst.value.data.copy_from_slice(&src.value.data);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.all_finite())
    }
}
