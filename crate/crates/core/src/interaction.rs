//! Human-object pairing, global-context fusion, the interaction encoder and
//! the verb head.

use alloc::vec::Vec;

use crate::autograd::{NodeId, Tape};
use crate::error::Result;
use crate::fnda::{encoder_block, BlockIds, MaskMode};
use crate::nn::{ffn, sigmoid, Dropout, FfnIds};
use crate::params::ParamStore;
use crate::scene::Token;
use crate::tensor::Matrix;

/// Every ordered `(human, other)` pair with `other != human`. Other humans
/// count as objects.
pub fn make_pairs(tokens: &[Token]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if !t.is_human {
            continue;
        }
        for j in 0..tokens.len() {
            if j != i {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// `[x_i ; x_j] + ctx` for every pair; `x` is `n x d`, `ctx` is `1 x 2d`.
pub fn fuse_pairs_forward(
    tape: &mut Tape,
    x: NodeId,
    ctx: NodeId,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    let hs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let os: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let h = tape.gather_rows(x, &hs)?;
    let o = tape.gather_rows(x, &os)?;
    let cat = tape.concat_cols(&[h, o])?;
    tape.add_row(cat, ctx)
}

/// Plain single-pair fusion: `[t_i ; t_j] + ffn(g)`.
pub fn fuse_pair(
    ti: &[f64],
    tj: &[f64],
    g: &[f64],
    ctx: (&Matrix, &Matrix, &Matrix, &Matrix),
) -> Result<Vec<f64>> {
    let c = ffn(&Matrix::row_vector(g), ctx.0, ctx.1, ctx.2, ctx.3)?;
    let cat = Matrix::row_vector(&[ti, tj].concat());
    Ok(cat.add(&c)?.into_data())
}

/// Unmasked self-attention layers over the pair set.
pub fn interaction_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    h: NodeId,
    layers: &[BlockIds],
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    let mut x = h;
    for ids in layers {
        x = encoder_block(tape, store, x, None, ids, heads, MaskMode::Additive, dropout)?.0;
    }
    Ok(x)
}

/// Verb logits `MLP(h)`; scores are their sigmoid.
pub fn verb_logits(
    tape: &mut Tape,
    store: &ParamStore,
    h: NodeId,
    head: &FfnIds,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    head.forward(tape, store, h, dropout)
}

/// Independent per-verb scores in `(0, 1)` for one pair representation.
pub fn predict_verbs(
    h: &[f64],
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Vec<f64>> {
    let logits = ffn(&Matrix::row_vector(h), w1, b1, w2, b2)?;
    Ok(logits.data().iter().map(|&x| sigmoid(x)).collect())
}
