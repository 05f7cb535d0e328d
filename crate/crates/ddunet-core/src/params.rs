//! Ordered, name-addressed collection of a model's tensors.
//!
//! The store is the unit of parameter counting, optimization and
//! checkpointing. Entries appear in a fixed construction order so checkpoint
//! layout and optimizer state stay aligned.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trainable: receives gradients, counted in the parameter budget.
    Param,
    /// Persistent state (batch-norm running statistics): checkpointed but
    /// neither trained nor counted.
    Buffer,
}

pub struct StoreEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: TensorRole,
}

#[derive(Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<StoreEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.push(StoreEntry {
            name: name.into(),
            tensor: tensor.clone(),
            role: TensorRole::Param,
        });
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.push(StoreEntry {
            name: name.into(),
            tensor: tensor.clone(),
            role: TensorRole::Buffer,
        });
    }

    pub fn entries(&self) -> &[StoreEntry<T>] {
        &self.entries
    }

    pub fn params(&self) -> impl Iterator<Item = &StoreEntry<T>> {
        self.entries.iter().filter(|e| e.role == TensorRole::Param)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable element count.
    pub fn param_count(&self) -> usize {
        self.params().map(|e| e.tensor.elem_count()).sum()
    }

    /// Trainable element count grouped by the top components of the entry
    /// names (everything before the last two dot-separated segments).
    pub fn param_breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for e in self.params() {
            let key: String = e
                .name
                .split('.')
                .take(depth)
                .collect::<Vec<_>>()
                .join(".");
            *map.entry(key).or_insert(0) += e.tensor.elem_count();
        }
        map
    }

    pub fn zero_grad(&self) {
        for e in self.params() {
            e.tensor.zero_grad();
        }
    }

    /// Clear gradient slots entirely (used before gradient checks).
    pub fn clear_grads(&self) {
        for e in self.params() {
            e.tensor.clear_grad();
        }
    }
}

/// Implemented by every block that owns tensors; walks them in a stable
/// order, prefixing hierarchical names.
pub trait Collect<T: Scalar> {
    fn collect(&self, prefix: &str, store: &mut ParamStore<T>);
}
