//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Ordered map from canonical parameter name to tensor.
///
/// Insertion order is the canonical order used by checkpoints. Tensors are
/// reference counted so forward passes can borrow them onto a tape without
/// copying; mutation goes through [`ParamStore::get_mut`] (copy-on-write).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    map: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.shift_remove(name).map(|t| Arc::try_unwrap(t).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(Arc::as_ref)
    }

    pub fn shared(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.map.get(name).cloned()
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| LabError::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Plain copies of the tensors, e.g. as input to a gradient check.
    pub fn to_map(&self) -> IndexMap<String, Tensor<T>> {
        self.map.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
    }

    /// Same names, shapes and order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }
}

impl ParamStore<f32> {
    /// Bitwise equality of one tensor in two stores.
    pub fn bytes_equal(&self, other: &Self, name: &str) -> bool {
        match (self.get(name), other.get(name)) {
            (Some(a), Some(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Tape nodes for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    nodes: IndexMap<String, NodeId>,
}

impl ParamNodes {
    /// Put every parameter on the tape; names accepted by `trainable` become
    /// gradient leaves, the rest constants.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut nodes = IndexMap::with_capacity(store.len());
        for (name, value) in &store.map {
            let id = if trainable(name) { tape.param(name, Arc::clone(value))? } else { tape.constant(Arc::clone(value)) };
            nodes.insert(name.clone(), id);
        }
        Ok(Self { nodes })
    }

    /// Bind all of `store` as constants except names present in `overrides`,
    /// which map to existing tape nodes.
    pub fn bind_with<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, overrides: &IndexMap<String, NodeId>) -> Self {
        let nodes = store
            .map
            .iter()
            .map(|(name, value)| {
                let id = match overrides.get(name) {
                    Some(&id) => id,
                    None => tape.constant(Arc::clone(value)),
                };
                (name.clone(), id)
            })
            .collect();
        Self { nodes }
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<NodeId> {
        self.get(name).ok_or_else(|| LabError::Contract(format!("parameter {name} not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }
}
