use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
    frozen: bool,
    /// Row that must never move (embedding padding row).
    fixed_row: Option<usize>,
}

/// Owns every trainable tensor of a model, addressed by id or unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tensor: tensor.with_requires_grad(true), frozen: false, fixed_row: None });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.values()
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.values_mut()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        self.params[id.0].tensor.shape()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        p.tensor = std::mem::replace(&mut p.tensor, Tensor::scalar(0.0)).with_requires_grad(!frozen);
    }

    pub fn fixed_row(&self, id: ParamId) -> Option<usize> {
        self.params[id.0].fixed_row
    }

    pub fn set_fixed_row(&mut self, id: ParamId, row: Option<usize>) {
        self.params[id.0].fixed_row = row;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies values from `other` for every parameter whose name and shape match.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&oid) = other.by_name.get(&p.name) {
                let src = &other.params[oid.0].tensor;
                if src.shape() == p.tensor.shape() {
                    p.tensor.values_mut().copy_from_slice(src.values());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Snapshot of all values, in id order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.values().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::contract("snapshot parameter count mismatch"));
        }
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            if s.len() != p.tensor.len() {
                return Err(Error::contract(format!("snapshot length mismatch for `{}`", p.name)));
            }
            p.tensor.values_mut().copy_from_slice(s);
        }
        Ok(())
    }
}
