//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`GradientTape`] as they run; each node keeps
//! its value plus whatever the backward pass needs. [`GradientTape::backward`]
//! walks the record in reverse and returns a gradient for every node that a
//! tracked leaf feeds into.
//!
//! Shape errors inside the recorded graph are programming errors and panic
//! with the offending shapes.
//!
//! ```
//! use asymrec::numerics::{GradientTape, Matrix};
//!
//! let mut tape = GradientTape::new();
//! let x = tape.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]));
//! let loss = tape.sum_squares(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::collections::HashMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    SumSquares(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Column(Var, usize),
    ScaleRows(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        // One T×T probability block per (segment, head), segment-major.
        probs: Vec<Matrix>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one forward/backward pass.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`GradientTape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Overwrites one gradient; used to inject faults in gradient-check tests.
    pub fn set(&mut self, v: Var, g: Matrix) {
        self.grads[v.0] = Some(g);
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax of a plain matrix.
pub fn log_softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf: backward produces its gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An untracked input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a model parameter, once per tape, keyed by its address.
    ///
    /// Later calls with the same parameter return the same leaf, so a
    /// parameter used in several places accumulates one gradient.
    pub fn param(&mut self, p: &Matrix) -> Var {
        let key = p as *const Matrix as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(p.clone());
        self.params.insert(key, v);
        v
    }

    /// The leaf previously bound for `p`, if the forward pass used it.
    pub fn param_var(&self, p: &Matrix) -> Option<Var> {
        self.params.get(&(p as *const Matrix as usize)).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul_nt(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            bv.rows() == 1 && bv.cols() == av.cols(),
            "add_row: {:?} + {:?}",
            av.shape(),
            bv.shape()
        );
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Squared Frobenius norm, as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum_squares());
        self.push(v, Op::SumSquares(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&vals);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&vals);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows of `table` at `idx` (repeats allowed).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table).select_rows(idx);
        self.push(v, Op::Gather(table, idx.to_vec()), &[table])
    }

    /// Column `j` of `a` as an n×1 node.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let av = self.value(a);
        let mut v = Matrix::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            v.set(r, 0, av.get(r, j));
        }
        self.push(v, Op::Column(a, j), &[a])
    }

    /// Multiplies row `i` of `a` by `w[i]`, where `w` is n×1.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert!(
            wv.cols() == 1 && wv.rows() == av.rows(),
            "scale_rows: {:?} by {:?}",
            av.shape(),
            wv.shape()
        );
        let mut v = av.clone();
        for r in 0..v.rows() {
            let s = wv.get(r, 0);
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        self.push(v, Op::ScaleRows(a, w), &[a, w])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with a 1×n scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert!(g.shape() == (1, d) && b.shape() == (1, d), "layer_norm params");
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask, applied
    /// independently inside each segment of rows.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert!(kv.shape() == (n, d) && vv.shape() == (n, d), "attention shapes");
        assert!(heads > 0 && d % heads == 0, "attention heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            assert!(seg.start + seg.len <= n, "segment out of range");
            for h in 0..heads {
                let off = h * dh;
                let t = seg.len;
                let mut p = Matrix::zeros(t, t);
                for i in 0..t {
                    let qi = &qv.row(seg.start + i)[off..off + dh];
                    let row = p.row_mut(i);
                    for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv.row(seg.start + j)[off..off + dh];
                        *slot = super::matrix::dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                }
                for i in 0..t {
                    let o = &mut out.row_mut(seg.start + i)[off..off + dh];
                    for j in 0..=i {
                        let w = p.get(i, j);
                        let vj = &vv.row(seg.start + j)[off..off + dh];
                        for (x, y) in o.iter_mut().zip(vj) {
                            *x += w * y;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let logp = log_softmax_rows(lv);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "cross_entropy target out of range");
            total -= logp.get(r, t);
        }
        let probs = logp.map(f64::exp);
        self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)).expect("shape"));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).matmul_tn(g).expect("shape"));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_unchecked(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.wants(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (x, y) in db.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x))),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gy, x| {
                    if x > 0.0 {
                        gy
                    } else if x < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(&node.value, |gy, y| if y > 0.0 { gy * 0.5 / y } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                acc(*a, self.value(*a).scale(s));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        acc(*p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.wants(*p) {
                        acc(*p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::Gather(table, idx) => {
                let (r, c) = self.value(*table).shape();
                let mut dt = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                acc(*table, dt);
            }
            Op::Column(a, j) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.set(i, *j, g.get(i, 0));
                }
                acc(*a, da);
            }
            Op::ScaleRows(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let s = wv.get(r, 0);
                        for x in da.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(*a, da);
                }
                if self.wants(*w) {
                    let mut dw = Matrix::zeros(wv.rows(), 1);
                    for r in 0..wv.rows() {
                        dw.set(r, 0, super::matrix::dot(g.row(r), av.row(r)));
                    }
                    acc(*w, dw);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for (c, slot) in da.row_mut(r).iter_mut().enumerate() {
                        *slot = yr[c] * (gr[c] - inner);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (c, slot) in da.row_mut(r).iter_mut().enumerate() {
                        *slot = g.get(r, c) - y.get(r, c).exp() * gsum;
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gamma);
                if self.wants(*beta) {
                    let mut db = Matrix::zeros(1, d);
                    for row in g.row_iter() {
                        for (s, v) in db.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*beta, db);
                }
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    let df = d as f64;
                    for r in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g.get(r, c) * gv.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat.get(r, c);
                        }
                        for c in 0..d {
                            let dh = g.get(r, c) * gv.data()[c];
                            let v = inv_std[r] / df
                                * (df * dh - sum_dh - xhat.get(r, c) * sum_dh_h);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                let mut pi = 0;
                for seg in segments {
                    let t = seg.len;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let off = h * dh;
                        let row = |m: &Matrix, i: usize| -> Vec<f64> {
                            m.row(seg.start + i)[off..off + dh].to_vec()
                        };
                        // dP = dO Vᵀ, then softmax backward to dS.
                        let mut ds = Matrix::zeros(t, t);
                        for i in 0..t {
                            let go = row(g, i);
                            let mut dp = vec![0.0; i + 1];
                            for (j, slot) in dp.iter_mut().enumerate() {
                                *slot = super::matrix::dot(&go, &row(vv, j));
                            }
                            let inner: f64 =
                                (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
                            for j in 0..=i {
                                ds.set(i, j, p.get(i, j) * (dp[j] - inner));
                            }
                            // dV_j += P_ij dO_i
                            for j in 0..=i {
                                let w = p.get(i, j);
                                let dst = &mut dv.row_mut(seg.start + j)[off..off + dh];
                                for (x, y) in dst.iter_mut().zip(&go) {
                                    *x += w * y;
                                }
                            }
                        }
                        for i in 0..t {
                            for j in 0..=i {
                                let s = ds.get(i, j) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = row(kv, j);
                                let qi = row(qv, i);
                                {
                                    let dst = &mut dq.row_mut(seg.start + i)[off..off + dh];
                                    for (x, y) in dst.iter_mut().zip(&kj) {
                                        *x += s * y;
                                    }
                                }
                                let dst = &mut dk.row_mut(seg.start + j)[off..off + dh];
                                for (x, y) in dst.iter_mut().zip(&qi) {
                                    *x += s * y;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.item();
                let mut dl = probs.scale(s);
                for (r, &t) in targets.iter().enumerate() {
                    let cur = dl.get(r, t);
                    dl.set(r, t, cur - s);
                }
                acc(*logits, dl);
            }
        }
    }
}

/// Free-function form of [`GradientTape::backward`].
pub fn backward(tape: &GradientTape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}
