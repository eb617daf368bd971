//! Named parameter storage shared by layers, optimiser and checkpoints.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Flat, ordered collection of every learnable array of a model.
///
/// Layers hold [`ParamId`]s into the store; the store itself is what the
/// optimiser updates and what checkpoints serialise, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count over the selected entries.
    pub fn count_where(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count_where(|e| e.trainable)
    }

    /// Replaces every value with the same-named entry of `other`; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("parameter {} missing", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}
