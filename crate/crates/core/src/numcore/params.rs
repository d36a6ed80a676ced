use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut};

use super::tape::{DiffTensor, Tape};
use super::{NumError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named dense parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(NumError::ShapeMismatch { op: "param", lhs: [rows, cols], rhs: [values.len(), 1] });
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(NumError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param { name, shape: [rows, cols], values });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }
}

/// Per-parameter gradients gathered after a backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradSet {
    pub fn new(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    /// Adds `grad` elementwise into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: GradSet) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), &g);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|x| *x *= k);
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

/// A tape bound to a parameter store. Parameters become leaves lazily on
/// first use; only ids marked trainable receive gradients.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    leaves: Vec<Option<DiffTensor>>,
    consts: Vec<Option<DiffTensor>>,
    trainable: Vec<bool>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self { tape: Tape::new(), store, leaves: vec![None; store.len()], consts: vec![None; store.len()], trainable: mask }
    }

    /// Graph in which no parameter is trainable.
    pub fn frozen(store: &'p ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Result<DiffTensor> {
        if let Some(t) = self.leaves[id.0] {
            return Ok(t);
        }
        let p = self.store.get(id);
        let t = if self.trainable[id.0] {
            self.tape.leaf(p.shape[0], p.shape[1], p.values.clone())?
        } else {
            self.tape.constant(p.shape[0], p.shape[1], p.values.clone())?
        };
        self.leaves[id.0] = Some(t);
        Ok(t)
    }

    /// The parameter's current values as a constant, for paths through
    /// which no gradient should reach it.
    pub fn param_const(&mut self, id: ParamId) -> Result<DiffTensor> {
        if let Some(t) = self.consts[id.0] {
            return Ok(t);
        }
        let p = self.store.get(id);
        let t = self.tape.constant(p.shape[0], p.shape[1], p.values.clone())?;
        self.consts[id.0] = Some(t);
        Ok(t)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Runs backward from `loss` and returns gradients of every trainable
    /// parameter (zeros for those the loss does not reach).
    pub fn backward(mut self, loss: DiffTensor) -> Result<GradSet> {
        self.tape.backward(loss)?;
        let mut grads = GradSet::new(self.store.len());
        for (i, trainable) in self.trainable.iter().enumerate() {
            if !trainable {
                continue;
            }
            let g = match self.leaves[i] {
                Some(t) => self.tape.take_grad(t).unwrap_or_else(|| vec![0.0; t.len()]),
                None => vec![0.0; self.store.get(ParamId(i)).len()],
            };
            grads.set(ParamId(i), g);
        }
        Ok(grads)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
