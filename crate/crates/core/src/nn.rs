//! Standard building blocks, both as plain functions on matrices and as
//! recorded tape operations.

use alloc::vec::Vec;

use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Writes the zero-mean unit-variance version of `x` into `out` and returns
/// `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Row-wise layer normalization; `gain` and `bias` have one entry per column.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        normalize_row(x.row(i), row);
        for ((o, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *o = *o * g + b;
        }
    }
    out
}

/// `x W + b`
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    x.matmul(w)?.add_row(b)
}

/// Two linear layers with a rectifier between them.
pub fn ffn(x: &Matrix, w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix) -> Result<Matrix> {
    let h = linear(x, w1, b1)?.map(relu);
    linear(&h, w2, b2)
}

/// Parameter indices of a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

/// Parameter indices of a two-layer feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
}

impl LinearIds {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

impl FfnIds {
    /// `relu(x W1 + b1) W2 + b2`, with optional dropout on the hidden layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<NodeId> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = maybe_dropout(tape, h, dropout)?;
        self.l2.forward(tape, store, h)
    }
}

/// Inverted dropout driven by a caller-supplied random source.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn rand::RngCore,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        use rand::Rng;
        if self.p <= 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - self.p);
        let data = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, Matrix::from_vec(r, c, data)?)
    }
}

pub fn maybe_dropout(
    tape: &mut Tape,
    x: NodeId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}
