//! Ordered, named parameter collection shared by the optimizer, checkpoints,
//! and gradient checks.

use crate::error::{NumError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Default)]
pub struct ParamSet {
    order: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.values[i] = t,
            None => {
                self.index.insert(name.to_string(), self.values.len());
                self.order.push(name.to_string());
                self.values.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.values[i]),
            None => None,
        }
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| NumError::Shape(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order
            .iter()
            .map(move |n| (n.as_str(), &self.values[self.index[n]]))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        // order[i] and values[i] are pushed together, so they stay aligned
        self.order
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter_mut())
    }
}
