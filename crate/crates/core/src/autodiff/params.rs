use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named tensor plus its trainability flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by hierarchical name, e.g. `backbone.block3.mhsa.q.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    /// Takes effect on the next forward pass recorded against this store.
    pub fn set_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        self.get_mut(name)?.trainable = flag;
        Ok(())
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, flag: bool) {
        for p in self.params.values_mut() {
            if pred(&p.name) {
                p.trainable = flag;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Element count over trainable parameters accepted by `filter`.
    pub fn trainable_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable && filter(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}
