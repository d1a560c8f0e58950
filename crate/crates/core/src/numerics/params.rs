use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named tensors in insertion order, each flagged trainable or frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<usize> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.params.push(Parameter { name: name.to_string(), tensor, trainable });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.index_of(name)?].tensor)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Indices of trainable tensors in iteration order.
    pub fn trainable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.iter().enumerate().filter(|(_, p)| p.trainable).map(|(i, _)| i)
    }

    /// Length of the flattened view over trainable tensors.
    pub fn flat_len(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in self.params.iter().filter(|p| p.trainable) {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.flat_len();
        if flat.len() != expected {
            return Err(Error::FlatLength { expected, got: flat.len() });
        }
        let mut offset = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every tensor on the tape: trainable ones as watched leaves, frozen ones as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if p.trainable { tape.watch(&p.tensor) } else { tape.constant(&p.tensor) })
            .collect()
    }

    /// `θ ← θ − lr · g` on trainable tensors.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (idx, g) in grads.iter() {
            let t = self.params[idx].tensor.data_mut();
            for (v, gv) in t.iter_mut().zip(g.data()) {
                *v -= lr * gv;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

/// One gradient tensor per trainable tensor of a [`ParameterSet`], keyed by parameter index.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub(crate) fn from_entries(entries: Vec<(usize, Tensor)>) -> Self {
        Self { entries }
    }

    /// All-zero gradients shaped like the trainable tensors of `params`.
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            entries: params
                .trainable_indices()
                .map(|i| (i, Tensor::zeros(params.tensor(i).shape())))
                .collect(),
        }
    }

    /// Builds gradients from a flat vector laid out like [`ParameterSet::to_flat`].
    pub fn from_flat(params: &ParameterSet, flat: &[f64]) -> Result<Self> {
        let expected = params.flat_len();
        if flat.len() != expected {
            return Err(Error::FlatLength { expected, got: flat.len() });
        }
        let mut offset = 0;
        let mut entries = Vec::new();
        for i in params.trainable_indices() {
            let shape = params.tensor(i).shape();
            let n = params.tensor(i).len();
            entries.push((i, Tensor::from_raw(shape.to_vec(), flat[offset..offset + n].to_vec())));
            offset += n;
        }
        Ok(Self { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries.iter().map(|(i, t)| (*i, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, param_index: usize) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == param_index).map(|(_, t)| t)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inner product with another gradient set over matching parameter indices.
    pub fn dot(&self, other: &Gradients) -> f64 {
        let mut acc = 0.0;
        for (i, t) in &self.entries {
            if let Some(o) = other.get(*i) {
                for (a, b) in t.data().iter().zip(o.data()) {
                    acc += a * b;
                }
            }
        }
        acc
    }

    /// `self += scale · other` over matching parameter indices.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (i, t) in &mut self.entries {
            if let Some(o) = other.get(*i) {
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}
