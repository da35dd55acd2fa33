use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Config(format!("duplicate parameter {name}")));
        }
        let id = self.names.len();
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.index.insert(name.into(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Fails on the first parameter whose name or shape differs.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        for (i, (name, t)) in self.iter().enumerate() {
            match other.names.get(i) {
                Some(n) if n == name && other.tensors[i].shape() == t.shape() => {}
                Some(n) => {
                    return Err(TensorError::Config(format!(
                        "parameter {i} differs: {name} {:?} vs {n} {:?}",
                        t.shape(),
                        other.tensors[i].shape()
                    )))
                }
                None => return Err(TensorError::Config(format!("parameter {name} missing"))),
            }
        }
        if other.len() > self.len() {
            return Err(TensorError::Config(format!(
                "unexpected parameter {}",
                other.names[self.len()]
            )));
        }
        Ok(())
    }
}
