//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op as a node holding its forward value. Nodes are
//! appended in evaluation order, so [`Graph::backward`] is a single reverse
//! sweep. Parameter leaves borrow their tensors, which lets many graphs share
//! one parameter set across threads.

use std::borrow::Cow;

use super::tensor::{gemm_into, matmul_raw, transpose_raw, Scalar, Tensor};
use super::NumericError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceBlock {
        x: Var,
        row: usize,
        col: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SqError {
        pred: Var,
        target: Vec<F>,
        weights: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Expectile {
        pred: Var,
        target: Vec<F>,
        weights: Vec<F>,
        alpha: F,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceBlock { .. } => "slice_block",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqError { .. } => "squared_error",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Expectile { .. } => "expectile",
        }
    }
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct NodeGrads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> NodeGrads<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

/// A recorded computation.
pub struct Graph<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
    fault: Option<(usize, &'static str)>,
}

impl<'a, F: Scalar> Default for Graph<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// First non-finite node recorded so far, as an error.
    pub fn check(&self) -> Result<(), NumericError> {
        match self.fault {
            None => Ok(()),
            Some((node, op)) => Err(NumericError::NonFinite { op, node }),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        // borrowed parameters are checked by the optimizer instead
        if self.fault.is_none() && matches!(value, Cow::Owned(_)) && !value.is_finite() {
            self.fault = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(owned(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        self.push(owned(vec![n, m], out), Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(owned(shape, out), Op::Add(a, b), rg)
    }

    /// `x[m,n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(row).len(), n, "add_row width");
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(row);
        self.push(owned(shape, out), Op::AddRow(x, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(owned(shape, out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Cow::Owned(t), Op::Scale(a, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, s, half, one) = (F::of(GELU_C), F::of(GELU_S), F::of(0.5), F::one());
        let t = self
            .value(a)
            .map(|x| half * x * (one + (s * (x + c * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(Cow::Owned(t), Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(Cow::Owned(t), Op::Tanh(a), rg)
    }

    /// Row-wise softmax. With a mask, disallowed entries get probability 0 and
    /// a row with no allowed entry is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let v = self.value(a);
        let (m, n) = v.dims2();
        if let Some(mask) = mask {
            assert_eq!(mask.len(), m * n, "softmax mask size");
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mut max = F::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == F::neg_infinity() {
                continue;
            }
            let mut total = F::zero();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    out[i * n + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / total;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(owned(shape, out), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = v.dims2();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(owned(shape, out), Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (m, n) = v.dims2();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == n && b.len() == n, "layer_norm affine width");
        let nf = F::of(n as f64);
        let mut xhat = vec![F::zero(); m * n];
        let mut inv_std = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<F>() / nf;
            let is = F::one() / (var + F::of(eps)).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            owned(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Rows `idx` of a `[v, d]` table, as `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let (rows, d) = t.dims2();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < rows, "gather index {i} out of range {rows}");
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(
            owned(vec![idx.len(), d], out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        let (m, n) = v.dims2();
        assert!(start < end && end <= n, "slice_cols range");
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v.data()[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        self.push(owned(vec![m, w], out), Op::SliceCols { x, start }, rg)
    }

    /// Rows `rows` and columns `cols` of a matrix.
    pub fn slice_block(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Var {
        let v = self.value(x);
        let (m, n) = v.dims2();
        assert!(rows.start < rows.end && rows.end <= m, "slice_block rows");
        assert!(cols.start < cols.end && cols.end <= n, "slice_block cols");
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&v.data()[i * n + cols.start..i * n + cols.end]);
        }
        let rg = self.rg(x);
        let op = Op::SliceBlock {
            x,
            row: rows.start,
            col: cols.start,
        };
        self.push(owned(vec![rows.len(), cols.len()], out), op, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.dims2().0, m, "concat_cols rows");
                out.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(owned(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.dims2().1, n, "concat_rows cols");
            m += v.dims2().0;
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(owned(vec![m, n], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<F>() / F::of(v.len() as f64);
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(a), rg)
    }

    /// `sum_i w_i * sum_j (pred_ij - target_ij)^2` over rows of `pred`.
    pub fn squared_error(&mut self, pred: Var, target: &[F], weights: &[F]) -> Var {
        let v = self.value(pred);
        let (m, n) = v.dims2();
        assert_eq!(target.len(), m * n, "squared_error target size");
        assert_eq!(weights.len(), m, "squared_error weights");
        let mut s = F::zero();
        for i in 0..m {
            if weights[i] == F::zero() {
                continue;
            }
            let row: F = (0..n)
                .map(|j| {
                    let d = v.data()[i * n + j] - target[i * n + j];
                    d * d
                })
                .sum();
            s = s + weights[i] * row;
        }
        let rg = self.rg(pred);
        self.push(
            Cow::Owned(Tensor::scalar(s)),
            Op::SqError {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// `sum_i w_i * -log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let v = self.value(logits);
        let (m, n) = v.dims2();
        assert!(targets.len() == m && weights.len() == m, "cross_entropy sizes");
        let mut probs = vec![F::zero(); m * n];
        let mut s = F::zero();
        for i in 0..m {
            let row = v.row(i);
            let lse = log_sum_exp(row);
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
            assert!(targets[i] < n, "cross_entropy target out of range");
            if weights[i] != F::zero() {
                s = s + weights[i] * (lse - row[targets[i]]);
            }
        }
        let rg = self.rg(logits);
        self.push(
            Cow::Owned(Tensor::scalar(s)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Asymmetric squared loss `sum_i w_i |alpha - 1(u_i < 0)| u_i^2` with
    /// residual `u = target - pred`.
    pub fn expectile(&mut self, pred: Var, target: &[F], weights: &[F], alpha: F) -> Var {
        let v = self.value(pred);
        assert!(target.len() == v.len() && weights.len() == v.len(), "expectile sizes");
        let s = v
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| w * expectile_weight(t - p, alpha) * (t - p) * (t - p))
            .sum();
        let rg = self.rg(pred);
        self.push(
            Cow::Owned(Tensor::scalar(s)),
            Op::Expectile {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                alpha,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads<F>, NumericError> {
        self.check()?;
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            if !dy.is_finite() {
                return Err(NumericError::NonFinite {
                    op: node.op.name(),
                    node: id,
                });
            }
            grads[id] = Some(dy);
        }
        Ok(NodeGrads { grads })
    }

    fn backprop_node(&self, node: &Node<'a, F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let y = node.value.as_ref();
        let g = dy.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().1;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.acc_with(grads, a, |out, beta| gemm_into(g, false, bv, true, m, n, k, beta, out));
                self.acc_with(grads, b, |out, beta| gemm_into(av, true, g, false, k, m, n, beta, out));
            }
            &Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2();
                self.acc(grads, a, transpose_raw(g, n, m));
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.to_vec());
            }
            &Op::AddRow(x, row) => {
                self.acc(grads, x, g.to_vec());
                if self.rg(row) {
                    let (m, n) = y.dims2();
                    let mut dr = vec![F::zero(); n];
                    for i in 0..m {
                        for (d, &gv) in dr.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d = *d + gv;
                        }
                    }
                    self.acc(grads, row, dr);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = self.value(b).data();
                    self.acc(grads, a, g.iter().zip(vb).map(|(&d, &z)| d * z).collect());
                }
                if self.rg(b) {
                    let va = self.value(a).data();
                    self.acc(grads, b, g.iter().zip(va).map(|(&d, &z)| d * z).collect());
                }
            }
            &Op::Scale(a, c) => self.acc(grads, a, g.iter().map(|&d| d * c).collect()),
            &Op::Gelu(a) => {
                let (c, s, half, one) = (F::of(GELU_C), F::of(GELU_S), F::of(0.5), F::one());
                let three = F::of(3.0);
                let dx = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| {
                        let t = (s * (x + c * x * x * x)).tanh();
                        let dt = (one - t * t) * s * (one + three * c * x * x);
                        d * (half * (one + t) + half * x * dt)
                    })
                    .collect();
                self.acc(grads, a, dx);
            }
            &Op::Tanh(a) => {
                let dx = y.data().iter().zip(g).map(|(&t, &d)| d * (F::one() - t * t)).collect();
                self.acc(grads, a, dx);
            }
            &Op::Softmax(a) => {
                let (m, n) = y.dims2();
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: F = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, a, dx);
            }
            &Op::LogSoftmax(a) => {
                let (m, n) = y.dims2();
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let total: F = gr.iter().copied().sum();
                    for j in 0..n {
                        dx[i * n + j] = gr[j] - y.data()[i * n + j].exp() * total;
                    }
                }
                self.acc(grads, a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = y.dims2();
                let gm = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![F::zero(); n];
                    let mut db = vec![F::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[i * n + j] * xhat[i * n + j];
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                    self.acc(grads, *beta, db);
                }
                if self.rg(*x) {
                    let nf = F::of(n as f64);
                    let mut dx = vec![F::zero(); m * n];
                    for i in 0..m {
                        let mut sum_d = F::zero();
                        let mut sum_dh = F::zero();
                        for j in 0..n {
                            let dh = g[i * n + j] * gm[j];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gm[j];
                            dx[i * n + j] =
                                inv_std[i] / nf * (nf * dh - sum_d - xhat[i * n + j] * sum_dh);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let (_, d) = t.dims2();
                let mut dt = vec![F::zero(); t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g[r * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.value(x).dims2();
                let w = y.dims2().1;
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, x, dx);
            }
            &Op::SliceBlock { x, row, col } => {
                let n = self.value(x).dims2().1;
                let (h, w) = y.dims2();
                // a fresh slot starts at zero, so adding is right for either beta
                self.acc_with(grads, x, |out, _| {
                    for i in 0..h {
                        let dst = &mut out[(row + i) * n + col..(row + i) * n + col + w];
                        for (d, &gv) in dst.iter_mut().zip(&g[i * w..(i + 1) * w]) {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = y.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        self.acc(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.acc(grads, a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                self.acc(grads, a, vec![g[0] / F::of(n as f64); n]);
            }
            Op::SqError {
                pred,
                target,
                weights,
            } => {
                let v = self.value(*pred);
                let (m, n) = v.dims2();
                let two = F::of(2.0);
                let mut dp = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let k = i * n + j;
                        dp[k] = g[0] * two * weights[i] * (v.data()[k] - target[k]);
                    }
                }
                self.acc(grads, *pred, dp);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (m, n) = self.value(*logits).dims2();
                let mut dl = vec![F::zero(); m * n];
                for i in 0..m {
                    if weights[i] == F::zero() {
                        continue;
                    }
                    for j in 0..n {
                        let onehot = if j == targets[i] { F::one() } else { F::zero() };
                        dl[i * n + j] = g[0] * weights[i] * (probs[i * n + j] - onehot);
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::Expectile {
                pred,
                target,
                weights,
                alpha,
            } => {
                let two = F::of(2.0);
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let u = t - p;
                        -g[0] * two * w * expectile_weight(u, *alpha) * u
                    })
                    .collect();
                self.acc(grads, *pred, dp);
            }
        }
    }

    /// Hands the gradient slot of `v` to `write` with `beta` = 1 for an
    /// existing slot or 0 for a fresh zeroed one; `write` stores
    /// `contribution + beta * out`.
    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, write: impl FnOnce(&mut [F], F)) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => write(existing.data_mut(), F::one()),
            slot @ None => {
                let mut t = Tensor::zeros(self.value(v).shape());
                write(t.data_mut(), F::zero());
                *slot = Some(t);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, d: Vec<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d) {
                    *e = *e + x;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient matches value shape"));
            }
        }
    }
}

/// `|alpha - 1(u < 0)|`.
pub fn expectile_weight<F: Scalar>(u: F, alpha: F) -> F {
    if u < F::zero() {
        F::one() - alpha
    } else {
        alpha
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

fn owned<'a, F: Scalar>(shape: Vec<usize>, data: Vec<F>) -> Cow<'a, Tensor<F>> {
    Cow::Owned(Tensor::new(shape, data).expect("op output matches its shape"))
}
