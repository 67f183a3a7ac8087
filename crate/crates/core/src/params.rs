use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::arg("name", alloc::format!("duplicate parameter `{name}`")));
        }
        self.entries.push(Param { name, value, grad: None });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.entries[index]
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, g: &[f64]) -> Result<()> {
        let p = &mut self.entries[index];
        if g.len() != p.value.len() {
            return Err(Error::DimMismatch { what: "parameter gradient", expected: p.value.len(), got: g.len() });
        }
        let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (d, s) in slot.iter_mut().zip(g) {
            *d += s;
        }
        Ok(())
    }

    /// Replaces every value with the one of the same name from `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for p in &mut self.entries {
            let src = other.by_name(&p.name).ok_or_else(|| Error::arg("params", alloc::format!("missing `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load params", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
            p.grad = None;
        }
        Ok(())
    }
}
