//! Dense 64-bit float tensors and the named parameter store.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorF {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TensorF {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Input(format!("zero dimension in shape {shape:?}")));
        }
        if expected != values.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} implies {expected} values, got {}",
                values.len()
            )));
        }
        Ok(TensorF { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorF {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorF {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        TensorF {
            shape: vec![values.len()],
            values,
        }
    }

    /// Glorot-uniform initialization: uniform(-s, s) with
    /// s = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        TensorF { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Scalar convenience accessor for single-element tensors.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(TensorF {
            shape,
            values: self.values.clone(),
        })
    }
}

/// One named parameter: its value and the accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: TensorF,
    pub grad: TensorF,
}

/// Ordered map of named parameters. Iteration order is the lexicographic
/// name order, so checkpoints and updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorF) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let grad = TensorF::zeros(value.shape().to_vec());
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&TensorF> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut TensorF> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&TensorF> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &TensorF) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::shape(
                format!("gradient for {name:?}"),
                entry.grad.shape(),
                grad.shape(),
            ));
        }
        for (g, d) in entry.grad.values_mut().iter_mut().zip(grad.values()) {
            *g += d;
        }
        Ok(())
    }

    /// Plain SGD: value <- value - lr * grad, for every entry.
    pub fn sgd_step(&mut self, lr: f64) {
        for entry in self.entries.values_mut() {
            for (v, g) in entry
                .value
                .values_mut()
                .iter_mut()
                .zip(entry.grad.values())
            {
                *v -= lr * g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.values_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}
