//! Token post-processing: intra-class diversification through a per-class
//! feature memory, then fusion with the spatial-relation embedding.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{softmax, FfnIds};
use crate::params::ParamStore;
use crate::scene::Token;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcdConfig {
    /// Buffer capacity per class.
    pub capacity: usize,
    /// Memory entries sampled per token.
    pub samples: usize,
    /// Minimum detection score for a token to be stored.
    pub threshold: f64,
}

impl Default for IcdConfig {
    fn default() -> Self {
        Self {
            capacity: 64,
            samples: 8,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub score: f64,
}

/// Bounded FIFO buffer of confident token features per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    capacity: usize,
    threshold: f64,
    buffers: BTreeMap<u32, VecDeque<MemoryEntry>>,
}

impl ClassMemory {
    pub fn new(cfg: &IcdConfig) -> Self {
        Self {
            capacity: cfg.capacity,
            threshold: cfg.threshold,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, class: u32) -> Option<&VecDeque<MemoryEntry>> {
        self.buffers.get(&class)
    }

    pub fn len(&self, class: u32) -> usize {
        self.buffers.get(&class).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.values().all(VecDeque::is_empty)
    }

    /// Stores the token's feature if its score clears the threshold,
    /// evicting the oldest entry of a full buffer.
    pub fn update(&mut self, token: &Token) {
        if token.score < self.threshold || self.capacity == 0 {
            return;
        }
        let buf = self.buffers.entry(token.class_id).or_default();
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(MemoryEntry {
            feature: token.feature.clone(),
            score: token.score,
        });
    }

    /// Samples up to `l` stored features of `class` without replacement.
    pub fn sample(&self, class: u32, l: usize, rng: &mut dyn RngCore) -> Vec<&[f64]> {
        let Some(buf) = self.buffers.get(&class) else {
            return Vec::new();
        };
        let k = l.min(buf.len());
        if k == 0 {
            return Vec::new();
        }
        rand::seq::index::sample(rng, buf.len(), k)
            .into_iter()
            .map(|i| buf[i].feature.as_slice())
            .collect()
    }
}

pub fn memory_update(mem: &mut ClassMemory, token: &Token) {
    mem.update(token);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcdIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
}

/// Cross-attention of every token onto a sample of its class memory:
/// `t + softmax(t Wq (M Wk)^T / sqrt(d)) M Wv`. Tokens whose class buffer is
/// empty pass through unchanged. Memory features are constants.
pub fn icd_forward(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[Token],
    mem: &ClassMemory,
    ids: &IcdIds,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Empty("icd_forward"));
    }
    let d = tokens[0].feature.len();
    let inv_sqrt = 1.0 / libm::sqrt(d as f64);
    let wq = tape.param(store, ids.wq);
    let wk = tape.param(store, ids.wk);
    let wv = tape.param(store, ids.wv);
    let mut rows = Vec::with_capacity(tokens.len());
    for t in tokens {
        let tn = tape.constant(Matrix::row_vector(&t.feature));
        let sampled = mem.sample(t.class_id, samples, rng);
        if sampled.is_empty() {
            rows.push(tn);
            continue;
        }
        let m = tape.constant(Matrix::from_rows(&sampled)?);
        let q = tape.matmul(tn, wq)?;
        let k = tape.matmul(m, wk)?;
        let v = tape.matmul(m, wv)?;
        let s = tape.matmul_t(q, k)?;
        let s = tape.scale(s, inv_sqrt);
        let p = tape.softmax(s);
        let agg = tape.matmul(p, v)?;
        rows.push(tape.add(tn, agg)?);
    }
    tape.concat_rows(&rows)
}

/// Plain weights of the diversification cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct IcdWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Diversified feature of a single token.
pub fn icd_diversify(
    token: &Token,
    mem: &ClassMemory,
    l: usize,
    w: &IcdWeights,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let sampled = mem.sample(token.class_id, l, rng);
    if sampled.is_empty() {
        return Ok(token.feature.clone());
    }
    let t = Matrix::row_vector(&token.feature);
    let m = Matrix::from_rows(&sampled)?;
    let q = t.matmul(&w.wq)?;
    let k = m.matmul(&w.wk)?;
    let v = m.matmul(&w.wv)?;
    let inv_sqrt = 1.0 / libm::sqrt(token.feature.len() as f64);
    let logits: Vec<f64> = (0..k.rows()).map(|r| dot(q.row(0), k.row(r)) * inv_sqrt).collect();
    let p = softmax(&logits);
    let mut out = token.feature.clone();
    for (r, pr) in p.iter().enumerate() {
        for (o, vv) in out.iter_mut().zip(v.row(r)) {
            *o += pr * vv;
        }
    }
    Ok(out)
}

/// `FFN([t; p])` for every token; `t` is `n x d`, `p` is `n x d_p`.
pub fn spatial_fuse_forward(
    tape: &mut Tape,
    store: &ParamStore,
    t: NodeId,
    p: NodeId,
    ids: &FfnIds,
) -> Result<NodeId> {
    let cat = tape.concat_cols(&[t, p])?;
    ids.forward(tape, store, cat, &mut None)
}

/// [`spatial_fuse_forward`] for one token on plain weights.
pub fn spatial_fuse(
    t: &[f64],
    p: &[f64],
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Vec<f64>> {
    let x = Matrix::row_vector(&[t, p].concat());
    Ok(crate::nn::ffn(&x, w1, b1, w2, b2)?.into_data())
}
