//! Named parameter store with a stable order.
//!
//! Insertion order is the serialization order and the order in which the
//! optimizer walks parameters, which keeps training bit-reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running normalization statistics; saved but never differentiated.
    Statistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?.0].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id.0].value)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Same names, kinds and shapes, all zeros: the layout used for
    /// gradients and optimizer state.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds `other` into `self`; both must share a layout.
    pub fn accumulate(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.axpy(scale, &b.value)?;
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(format!(
                "parameter trees differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` {:?} does not line up with `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}
