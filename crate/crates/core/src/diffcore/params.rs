use std::ops::{Deref, DerefMut};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter arrays.
///
/// Layers hold [`ParamId`]s rather than tensors, so one network description
/// can be evaluated against several stores with the same layout (online and
/// target networks, or a checkpoint loaded from disk).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Overwrite the listed parameters with the values held by `src`.
    pub fn copy_from(&mut self, src: &ParamStore, ids: &[ParamId]) -> Result<()> {
        if src.names != self.names {
            return contract_err("parameter layouts differ");
        }
        for &id in ids {
            if src.get(id).shape() != self.get(id).shape() {
                return contract_err(format!("shape of {} differs", self.name(id)));
            }
            self.tensors[id.0] = src.tensors[id.0].clone();
        }
        Ok(())
    }
}

/// A tape paired with a parameter store. Parameters are placed on the tape
/// the first time a layer asks for them.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// Parameters become differentiable leaves.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], trainable: true }
    }

    /// Parameters become constants; used for target networks and inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], trainable: false }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Backpropagate and return one gradient per store entry (zero where the
    /// parameter did not influence `loss`).
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let grads = self.tape.backward(loss)?;
        Ok(self.collect(&grads))
    }

    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.get(v),
                None => {
                    let t = self.store.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
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
