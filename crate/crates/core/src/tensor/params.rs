//! Named parameter storage with gradient accumulators and Adam state.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Adam first moment.
    pub m: Vec<T>,
    /// Adam second moment.
    pub v: Vec<T>,
    pub step: u64,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// All tensors of a model, trainable parameters and buffers alike, kept in
/// registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
    has_grads: bool,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            has_grads: false,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let n = value.numel();
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        self.has_grads = false;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), g.len());
        e.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        self.has_grads = true;
    }

    /// Overwrites a gradient directly, marking gradients as populated.
    pub fn set_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.grad.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {} has {} values, expected {}",
                e.name,
                g.len(),
                e.grad.len()
            )));
        }
        e.grad.copy_from_slice(g);
        self.has_grads = true;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Two distinct buffers borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (lo[a.0].value.data_mut(), hi[0].value.data_mut())
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (hi[0].value.data_mut(), lo[b.0].value.data_mut())
        }
    }

    /// Copies every value from `other`, which must have identical names and
    /// shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::CheckpointMismatch("parameter counts differ".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
