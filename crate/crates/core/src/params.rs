//! Named parameter tensors and their gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a trainable tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
            trainable: true,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &Matrix {
        &self.entries[idx].value
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.entries[idx].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Matrix> {
        Ok(self.get(self.index(name)?))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    pub fn set_trainable(&mut self, idx: usize, trainable: bool) {
        self.entries[idx].trainable = trainable;
    }

    /// Freezes every tensor whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(alloc::format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Config(alloc::format!(
                    "parameter `{}` where `{}` was expected",
                    b.name,
                    a.name
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape {
                    op: "param_store",
                    left: a.value.shape(),
                    right: b.value.shape(),
                });
            }
        }
        Ok(())
    }
}

/// One gradient tensor per [`ParamStore`] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    tensors: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .entries
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.tensors[idx]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Global L2 norm.
    pub fn norm(&self) -> f64 {
        libm::sqrt(
            self.tensors
                .iter()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }
}

/// Uniform Glorot initialization.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}
