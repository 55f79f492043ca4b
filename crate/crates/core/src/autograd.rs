//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates gradients into a [`GradStore`] aligned with the [`ParamStore`]
//! whose tensors were pulled onto the tape with [`Tape::param`].
//!
//! Nodes that do not depend on any parameter are skipped on the way back.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn;
use crate::objective::focal_logit_term;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    /// Plus a constant; gradient passes straight through.
    AddConst(NodeId),
    MulConst(NodeId, Matrix),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    DaWeight {
        alpha: NodeId,
        beta: NodeId,
        distances: Vec<f64>,
    },
    Focal {
        logits: NodeId,
        weights: Option<NodeId>,
        /// d(loss)/d(logit) per entry, already scaled and weighted except for `weights`.
        dlogits: Matrix,
        /// Unweighted per-row loss, needed for the weight gradient.
        row_loss: Vec<f64>,
        scale: f64,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
}

/// Loss hyper-parameters consumed by [`Tape::focal_loss`].
#[derive(Debug, Clone, Copy)]
pub struct FocalSpec {
    pub gamma: f64,
    pub balance: f64,
    /// Multiplier applied to the summed loss (for example `1 / #positives`).
    pub scale: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a) => self.ng(*a),
            Op::LayerNorm { x, gain, bias, .. } => self.ng(*x) || self.ng(*gain) || self.ng(*bias),
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.iter().any(|&p| self.ng(p)),
            Op::DaWeight { alpha, beta, .. } => self.ng(*alpha) || self.ng(*beta),
            Op::Focal {
                logits, weights, ..
            } => self.ng(*logits) || weights.is_some_and(|w| self.ng(w)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Places parameter `idx` of `store` on the tape; repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        if let Some(&(_, id)) = self.params.iter().find(|(p, _)| *p == idx) {
            return id;
        }
        let value = store.get(idx).clone();
        let id = if store.is_trainable(idx) {
            self.push(value, Op::Param(idx))
        } else {
            self.push(value, Op::Constant)
        };
        self.params.push((idx, id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Matrix) -> Result<NodeId> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        let v = self.value(a).hadamard(&c)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(nn::relu);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(nn::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape(),
                right: g.shape(),
            });
        }
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            inv_std.push(nn::normalize_row(xv.row(i), xhat.row_mut(i)));
        }
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, gk), bk) in out.row_mut(i).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gk + bk;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..out.rows() {
            nn::softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(a).gather_rows(idx)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Per-row weights `sigmoid(alpha * D_r + beta)` as an `m x 1` column;
    /// `alpha` and `beta` are `1 x 1`.
    pub fn da_weight(&mut self, alpha: NodeId, beta: NodeId, distances: &[f64]) -> Result<NodeId> {
        let (a, b) = (self.value(alpha), self.value(beta));
        if a.shape() != (1, 1) || b.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "da_weight",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (a, b) = (a.data()[0], b.data()[0]);
        let w: Vec<f64> = distances.iter().map(|&d| nn::sigmoid(a * d + b)).collect();
        let v = Matrix::from_vec(w.len(), 1, w)?;
        Ok(self.push(
            v,
            Op::DaWeight {
                alpha,
                beta,
                distances: distances.to_vec(),
            },
        ))
    }

    /// `scale * sum_r w_r * sum_c focal(sigmoid(logit_rc), y_rc)` as a `1 x 1` node.
    /// Without `weights` every row has weight one.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: &Matrix,
        weights: Option<NodeId>,
        spec: FocalSpec,
    ) -> Result<NodeId> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::Shape {
                op: "focal_loss",
                left: x.shape(),
                right: targets.shape(),
            });
        }
        let w: Option<Vec<f64>> = match weights {
            Some(w) => {
                let wv = self.value(w);
                if wv.shape() != (x.rows(), 1) {
                    return Err(Error::Shape {
                        op: "focal_loss weights",
                        left: x.shape(),
                        right: wv.shape(),
                    });
                }
                Some(wv.data().to_vec())
            }
            None => None,
        };
        let mut dlogits = Matrix::zeros(x.rows(), x.cols());
        let mut row_loss = Vec::with_capacity(x.rows());
        let mut total = 0.0;
        for r in 0..x.rows() {
            let wr = w.as_ref().map_or(1.0, |w| w[r]);
            let mut acc = 0.0;
            for c in 0..x.cols() {
                let (l, dl) = focal_logit_term(x[(r, c)], targets[(r, c)], spec.gamma, spec.balance)?;
                acc += l;
                dlogits[(r, c)] = spec.scale * wr * dl;
            }
            row_loss.push(acc);
            total += wr * acc;
        }
        let v = Matrix::filled(1, 1, spec.scale * total);
        Ok(self.push(
            v,
            Op::Focal {
                logits,
                weights,
                dlogits,
                row_loss,
                scale: spec.scale,
            },
        ))
    }

    /// Gradients of the `1 x 1` node `root` with respect to every trainable
    /// parameter placed on this tape. Parameters never placed get zeros.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Result<GradStore> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(root).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = GradStore::zeros_like(store);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.get_mut(*p).add_assign(&g)?,
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        acc(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        acc(&mut grads, *b, gb)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: dA = g b, dB = g^T a
                    if self.ng(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        acc(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = g.t_matmul(self.value(*a))?;
                        acc(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone())?;
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g)?;
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.sum_rows())?;
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g)?;
                    }
                }
                Op::AddConst(a) => acc(&mut grads, *a, g)?,
                Op::MulConst(a, c) => acc(&mut grads, *a, g.hadamard(c)?)?,
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s))?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    acc(&mut grads, *a, ga)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        acc(&mut grads, *bias, g.sum_rows())?;
                    }
                    if self.ng(*gain) {
                        acc(&mut grads, *gain, g.hadamard(xhat)?.sum_rows())?;
                    }
                    if self.ng(*x) {
                        let gain_v = self.value(*gain).data();
                        let cols = xhat.cols();
                        let nf = cols as f64;
                        let mut gx = Matrix::zeros(xhat.rows(), cols);
                        for i in 0..xhat.rows() {
                            let (gr, xr) = (g.row(i), xhat.row(i));
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for k in 0..cols {
                                let dxh = gr[k] * gain_v[k];
                                sum_d += dxh;
                                sum_dx += dxh * xr[k];
                            }
                            let out = gx.row_mut(i);
                            for k in 0..cols {
                                let dxh = gr[k] * gain_v[k];
                                out[k] = inv_std[i] / nf * (nf * dxh - sum_d - xr[k] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, gx)?;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - inner);
                        }
                    }
                    acc(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice_cols(start, w)?)?;
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.ng(p) {
                            let idx: Vec<usize> = (start..start + h).collect();
                            acc(&mut grads, p, g.gather_rows(&idx)?)?;
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga)?;
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let ga = Matrix::filled(src.rows(), src.cols(), g.data()[0]);
                    acc(&mut grads, *a, ga)?;
                }
                Op::DaWeight {
                    alpha,
                    beta,
                    distances,
                } => {
                    let mut ga = 0.0;
                    let mut gb = 0.0;
                    for ((gv, w), d) in g.data().iter().zip(node.value.data()).zip(distances) {
                        let s = gv * w * (1.0 - w);
                        ga += s * d;
                        gb += s;
                    }
                    if self.ng(*alpha) {
                        acc(&mut grads, *alpha, Matrix::filled(1, 1, ga))?;
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, Matrix::filled(1, 1, gb))?;
                    }
                }
                Op::Focal {
                    logits,
                    weights,
                    dlogits,
                    row_loss,
                    scale,
                } => {
                    let up = g.data()[0];
                    if self.ng(*logits) {
                        acc(&mut grads, *logits, dlogits.scale(up))?;
                    }
                    if let Some(w) = weights {
                        if self.ng(*w) {
                            let gw: Vec<f64> = row_loss.iter().map(|l| up * scale * l).collect();
                            acc(&mut grads, *w, Matrix::from_vec(gw.len(), 1, gw)?)?;
                        }
                    }
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use alloc::vec;

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(x W) with x = I: dW = x^T 1 = all ones
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::identity(2));
        let wn = tape.param(&store, w);
        let y = tape.matmul(x, wn).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(w).data(), &[1.0; 6]);
    }

    #[test]
    fn outer_product_for_general_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::zeros(3, 2));
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1., -2., 0.5]));
        let wn = tape.param(&store, w);
        let y = tape.matmul(x, wn).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(w).data(), &[1., 1., -2., -2., 0.5, 0.5]);
    }

    #[test]
    fn unused_param_has_zero_gradient_and_doubling_doubles() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 2, 0.3));
        let unused = store.add("u", Matrix::filled(2, 2, 1.0));
        let run = |s: f64| {
            let mut tape = Tape::new();
            let wn = tape.param(&store, w);
            let sq = tape.sigmoid(wn);
            let l = tape.sum(sq);
            let l = tape.scale(l, s);
            tape.backward(l, &store).unwrap()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        assert_eq!(g1.get(unused).data(), &[0.0; 4]);
        for (a, b) in g1.get(w).data().iter().zip(g2.get(w).data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn empty_tape_is_an_error() {
        let store = ParamStore::new();
        let tape = Tape::new();
        assert_eq!(tape.backward(NodeId(0), &store), Err(Error::NoForward));
    }
}
