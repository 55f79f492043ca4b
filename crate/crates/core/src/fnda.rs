//! Far-near distance attention.
//!
//! Each token row of the distance matrix is split at its median: entries
//! strictly above the median are "far", the rest "near". Every token encoder
//! layer runs a block restricted to far tokens followed by a block restricted
//! to near tokens. A token always attends to itself.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::nn::{maybe_dropout, Dropout, FfnIds, LinearIds};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Logit offset for masked-out pairs in additive mode.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub far: Matrix,
    pub near: Matrix,
}

impl MaskPair {
    pub fn n(&self) -> usize {
        self.far.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked logits get [`MASK_NEG`] added, so their weight is exactly zero.
    #[default]
    Additive,
    /// Logits are multiplied by the 0/1 mask; masked entries become logit 0.
    MultiplicativeLiteral,
}

/// What the token encoder's attention is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Alternating far / near masks.
    #[default]
    Fnda,
    /// Same two-block layout, unmasked.
    Mhsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mask_mode: MaskMode,
    pub attention: AttentionKind,
}

impl Default for TokenEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            hidden: 1024,
            mask_mode: MaskMode::Additive,
            attention: AttentionKind::Fnda,
        }
    }
}

/// Median of a row, averaging the two central values for even lengths.
fn median(row: &[f64]) -> f64 {
    let mut v = row.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Far mask: `D_ij > median(row i)` or `i == j`. Near mask: complement off
/// the diagonal, ones on it. The median includes the zero diagonal entry.
pub fn build_masks(d: &DistanceMatrix) -> MaskPair {
    let n = d.n();
    let mut far = Matrix::zeros(n, n);
    let mut near = Matrix::zeros(n, n);
    for i in 0..n {
        let row = d.row(i);
        let med = median(row);
        for j in 0..n {
            if i == j {
                far[(i, j)] = 1.0;
                near[(i, j)] = 1.0;
            } else if row[j] > med {
                far[(i, j)] = 1.0;
            } else {
                near[(i, j)] = 1.0;
            }
        }
    }
    MaskPair { far, near }
}

/// Parameter indices of one attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub out: LinearIds,
}

/// Attention sublayer plus feed-forward sublayer, each followed by residual
/// add and layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub attn: AttentionIds,
    pub ln1: (usize, usize),
    pub ffn: FfnIds,
    pub ln2: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub far: BlockIds,
    pub near: BlockIds,
}

fn check_mask(mask: &Matrix, n: usize) -> Result<()> {
    if mask.shape() != (n, n) {
        return Err(Error::Shape {
            op: "attention mask",
            left: (n, n),
            right: mask.shape(),
        });
    }
    for i in 0..n {
        if mask[(i, i)] == 0.0 {
            return Err(Error::MaskDiagonal(i));
        }
    }
    Ok(())
}

/// Multi-head self-attention with an optional 0/1 mask shared by all heads.
/// Returns `x + proj(concat_h softmax(q_h k_h^T / sqrt(d_h)) v_h)` and the
/// per-head attention weight nodes.
#[allow(clippy::too_many_arguments)]
pub fn masked_mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    mask: Option<&Matrix>,
    ids: &AttentionIds,
    heads: usize,
    mode: MaskMode,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (n, d) = tape.value(x).shape();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    if let Some(m) = mask {
        check_mask(m, n)?;
    }
    let dh = d / heads;
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let wq = tape.param(store, ids.wq);
    let wk = tape.param(store, ids.wk);
    let wv = tape.param(store, ids.wv);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let bias = match (mask, mode) {
        (Some(m), MaskMode::Additive) => Some(m.map(|v| if v == 0.0 { MASK_NEG } else { 0.0 })),
        _ => None,
    };
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_t(qh, kh)?;
        let mut s = tape.scale(s, inv_sqrt);
        match (mask, mode) {
            (Some(_), MaskMode::Additive) => {
                s = tape.add_const(s, bias.as_ref().expect("built above"))?;
            }
            (Some(m), MaskMode::MultiplicativeLiteral) => {
                s = tape.mul_const(s, m.clone())?;
            }
            (None, _) => {}
        }
        let p = tape.softmax(s);
        probs.push(p);
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let proj = ids.out.forward(tape, store, cat)?;
    let proj = maybe_dropout(tape, proj, dropout)?;
    Ok((tape.add(x, proj)?, probs))
}

/// Post-norm encoder block: `y = LN(mhsa(x))`, `z = LN(y + ffn(y))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    mask: Option<&Matrix>,
    ids: &BlockIds,
    heads: usize,
    mode: MaskMode,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (a, probs) = masked_mhsa(tape, store, x, mask, &ids.attn, heads, mode, dropout)?;
    let g1 = tape.param(store, ids.ln1.0);
    let b1 = tape.param(store, ids.ln1.1);
    let y = tape.layer_norm(a, g1, b1)?;
    let f = ids.ffn.forward(tape, store, y, dropout)?;
    let f = maybe_dropout(tape, f, dropout)?;
    let r = tape.add(y, f)?;
    let g2 = tape.param(store, ids.ln2.0);
    let b2 = tape.param(store, ids.ln2.1);
    Ok((tape.layer_norm(r, g2, b2)?, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Far,
    Near,
    Full,
}

/// Attention weight nodes of every block run by an encoder, in order.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub blocks: Vec<(BlockKind, Vec<NodeId>)>,
}

/// Runs `layers` token encoder layers. In FNDA mode each layer is a far block
/// then a near block; in MHSA mode both blocks are unmasked.
pub fn token_encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    masks: &MaskPair,
    layers: &[LayerIds],
    cfg: &TokenEncoderConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(NodeId, AttentionTrace)> {
    let mut trace = AttentionTrace::default();
    let mut h = x;
    for layer in layers {
        let steps = match cfg.attention {
            AttentionKind::Fnda => [
                (BlockKind::Far, Some(&masks.far), &layer.far),
                (BlockKind::Near, Some(&masks.near), &layer.near),
            ],
            AttentionKind::Mhsa => [
                (BlockKind::Full, None, &layer.far),
                (BlockKind::Full, None, &layer.near),
            ],
        };
        for (kind, mask, ids) in steps {
            let (out, probs) =
                encoder_block(tape, store, h, mask, ids, cfg.heads, cfg.mask_mode, dropout)?;
            trace.blocks.push((kind, probs));
            h = out;
        }
    }
    Ok((h, trace))
}

/// Attention of token `i` on token `j`, averaged over heads and blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// Mean over every block, masked entries counting as zero.
    pub weight: f64,
    /// Mean over far blocks only (FNDA).
    pub far: Option<f64>,
    /// Mean over near blocks only (FNDA).
    pub near: Option<f64>,
}

/// One record per ordered token pair from an encoder trace.
pub fn attention_records(
    tape: &Tape,
    trace: &AttentionTrace,
    d: &DistanceMatrix,
) -> Vec<AttentionRecord> {
    let n = d.n();
    let mut all = vec![0.0; n * n];
    let mut far = vec![0.0; n * n];
    let mut near = vec![0.0; n * n];
    let (mut n_all, mut n_far, mut n_near) = (0usize, 0usize, 0usize);
    for (kind, heads) in &trace.blocks {
        let mut block = vec![0.0; n * n];
        for &p in heads {
            for (b, v) in block.iter_mut().zip(tape.value(p).data()) {
                *b += v / heads.len() as f64;
            }
        }
        let target = match kind {
            BlockKind::Far => {
                n_far += 1;
                Some(&mut far)
            }
            BlockKind::Near => {
                n_near += 1;
                Some(&mut near)
            }
            BlockKind::Full => None,
        };
        if let Some(t) = target {
            t.iter_mut().zip(&block).for_each(|(t, b)| *t += b);
        }
        all.iter_mut().zip(&block).for_each(|(t, b)| *t += b);
        n_all += 1;
    }
    let mean = |v: f64, c: usize| if c == 0 { None } else { Some(v / c as f64) };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            out.push(AttentionRecord {
                i,
                j,
                distance: d.get(i, j),
                weight: mean(all[k], n_all).unwrap_or(if i == j { 1.0 } else { 0.0 }),
                far: mean(far[k], n_far),
                near: mean(near[k], n_near),
            });
        }
    }
    out
}

/// Plain weights for a standalone attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
}

impl AttentionWeights {
    fn into_store(self) -> (ParamStore, AttentionIds) {
        let mut s = ParamStore::new();
        let ids = AttentionIds {
            wq: s.add("wq", self.wq),
            wk: s.add("wk", self.wk),
            wv: s.add("wv", self.wv),
            out: LinearIds {
                w: s.add("wo", self.wo),
                b: s.add("bo", self.bo),
            },
        };
        (s, ids)
    }
}

/// [`masked_mhsa`] on plain matrices, without recording gradients for the caller.
pub fn masked_mhsa_forward(
    x: &Matrix,
    mask: Option<&Matrix>,
    weights: &AttentionWeights,
    heads: usize,
    mode: MaskMode,
) -> Result<Matrix> {
    let (store, ids) = weights.clone().into_store();
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let (y, _) = masked_mhsa(&mut tape, &store, xn, mask, &ids, heads, mode, &mut None)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DistanceMatrix;

    fn dm(rows: &[&[f64]]) -> DistanceMatrix {
        DistanceMatrix::from_matrix(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_token_masks() {
        let m = build_masks(&dm(&[&[0.0]]));
        assert_eq!(m.far.data(), &[1.0]);
        assert_eq!(m.near.data(), &[1.0]);
    }

    #[test]
    fn median_split_hand_example() {
        let d = dm(&[&[0.0, 2.0, 5.0], &[2.0, 0.0, 4.0], &[5.0, 4.0, 0.0]]);
        let m = build_masks(&d);
        assert_eq!(m.far.row(0), &[1.0, 0.0, 1.0]);
        assert_eq!(m.near.row(0), &[1.0, 1.0, 0.0]);
        // row 1 = [2, 0, 4], median 2
        assert_eq!(m.far.row(1), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn even_row_median_is_mean_of_central_values() {
        assert_eq!(median(&[0.0, 1.0, 3.0, 10.0]), 2.0);
    }

    #[test]
    fn all_ties_go_near() {
        let d = DistanceMatrix::from_matrix(Matrix::zeros(4, 4)).unwrap();
        let m = build_masks(&d);
        assert_eq!(m.far, Matrix::identity(4));
        assert_eq!(m.near, Matrix::filled(4, 4, 1.0));
    }

    #[test]
    fn zero_diagonal_mask_rejected() {
        let w = AttentionWeights {
            wq: Matrix::identity(2),
            wk: Matrix::identity(2),
            wv: Matrix::identity(2),
            wo: Matrix::identity(2),
            bo: Matrix::zeros(1, 2),
        };
        let x = Matrix::filled(2, 2, 0.5);
        let mut mask = Matrix::filled(2, 2, 1.0);
        mask[(1, 1)] = 0.0;
        assert_eq!(
            masked_mhsa_forward(&x, Some(&mask), &w, 1, MaskMode::Additive),
            Err(Error::MaskDiagonal(1))
        );
        assert!(masked_mhsa_forward(&x, None, &w, 3, MaskMode::Additive).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = AttentionWeights {
            wq: Matrix::filled(2, 2, 0.3),
            wk: Matrix::filled(2, 2, -0.2),
            wv: Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap(),
            wo: Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(),
            bo: Matrix::row_vector(&[0.1, 0.2]),
        };
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let y = masked_mhsa_forward(&x, None, &w, 2, MaskMode::Additive).unwrap();
        // v = [2, 0]; proj = [0, 2] + b = [0.1, 2.2]; plus residual
        assert!((y[(0, 0)] - 1.1).abs() < 1e-15);
        assert!((y[(0, 1)] - 4.2).abs() < 1e-15);
    }
}
