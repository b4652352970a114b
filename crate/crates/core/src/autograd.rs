//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter leaf and every [`Tape::input`] leaf.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    PRelu(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    RowSums(Var),
    Sum(Var),
    LogSumExpRows(Var, Option<Vec<bool>>),
    Transpose(Var),
    SqNorm(Var),
    Norm(Var),
    SelectCols(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// `(param, gradient)` for every parameter that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Mat)> {
        let mut out: Vec<(ParamId, &Mat)> =
            self.params.iter().filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

const LN_EPS: f64 = 1e-5;

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for gradient checks on raw inputs).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Parameter leaf; each parameter is materialised once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul_bt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMulBT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let y = Mat::from_vec(va.rows(), va.cols(), va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect());
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let y = Mat::from_vec(va.rows(), va.cols(), va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect());
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        let mut y = self.value(a).clone();
        assert_eq!(y.cols(), r.len());
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(&r).for_each(|(x, b)| *x += b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(y, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        let mut y = self.value(a).clone();
        assert_eq!(y.cols(), r.len());
        for i in 0..y.rows() {
            y.row_mut(i).iter_mut().zip(&r).for_each(|(x, b)| *x *= b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(y, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(y, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let y = self.value(a).scaled(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(y, Op::ScaleBy(a, s), ng)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let y = self.value(a).map(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(y, Op::Act(a, f), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.act(a, Activation::Tanh)
    }

    /// Parametric ReLU with a learnable `1 x 1` negative slope.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Var {
        let s = self.scalar_value(slope);
        let y = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        let ng = self.ng(a) || self.ng(slope);
        self.push(y, Op::PRelu(a, slope), ng)
    }

    /// Row-wise softmax. `mask[j] == false` removes column `j` (probability 0).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        let mut y = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
            let mx = (0..row.len()).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let out = y.row_mut(i);
            let mut z = 0.0;
            for j in 0..row.len() {
                if allowed(j) {
                    out[j] = (row[j] - mx).exp();
                    z += out[j];
                }
            }
            if z > 0.0 {
                out.iter_mut().for_each(|p| *p /= z);
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut xhat = Mat::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut y = xhat.clone();
        for i in 0..m {
            for ((o, gg), bb) in y.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Selects rows of `table` by index (repeats allowed).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut y = Mat::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        self.push(y, Op::Gather(table, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                y.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::ConcatCols(parts), ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let y = Mat::from_vec(len, cols, v.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(a);
        self.push(y, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let mut y = Mat::zeros(v.rows(), len);
        for i in 0..v.rows() {
            y.row_mut(i).copy_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(y, Op::SliceCols(a, start), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(y, Op::MeanRows(a), ng)
    }

    /// `m x n -> m x 1` sums along each row.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = Mat::from_vec(v.rows(), 1, (0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(y, Op::RowSums(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(y, Op::Sum(a), ng)
    }

    /// `m x n -> m x 1` log-sum-exp of each row, restricted to `mask` columns.
    pub fn log_sum_exp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row(i);
            let vals: Vec<f64> =
                (0..row.len()).filter(|&j| mask.as_ref().is_none_or(|m| m[j])).map(|j| row[j]).collect();
            out.push(crate::tensor::log_sum_exp(&vals));
        }
        let y = Mat::from_vec(v.rows(), 1, out);
        let ng = self.ng(a);
        self.push(y, Op::LogSumExpRows(a, mask), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(y, Op::Transpose(a), ng)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let y = Mat::scalar(self.value(a).squared_norm());
        let ng = self.ng(a);
        self.push(y, Op::SqNorm(a), ng)
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let y = Mat::scalar(self.value(a).squared_norm().sqrt());
        let ng = self.ng(a);
        self.push(y, Op::Norm(a), ng)
    }

    /// Selects columns by index.
    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a);
        let mut y = Mat::zeros(v.rows(), idx.len());
        for i in 0..v.rows() {
            for (j, &c) in idx.iter().enumerate() {
                y.set(i, j, v.get(i, c));
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::SelectCols(a, idx), ng)
    }

    /// Single element as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let row = self.slice_rows(a, r, 1);
        self.select_cols(row, vec![c])
    }

    /// Row-wise dot products of two equally shaped matrices, `m x 1`.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sums(p)
    }

    /// Sum of a non-empty list of equally shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads, params: self.params.iter().map(|(&id, &v)| (id, v)).collect() }
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, g: Mat| {
            if ng(v) {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if ng(a) {
                    acc(a, dy.matmul_bt(val(b)));
                }
                if ng(b) {
                    acc(b, val(a).matmul_at(dy));
                }
            }
            &Op::MatMulBT(a, b) => {
                if ng(a) {
                    acc(a, dy.matmul(val(b)));
                }
                if ng(b) {
                    acc(b, dy.matmul_at(val(a)));
                }
            }
            &Op::Add(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.scaled(-1.0));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if ng(a) {
                    acc(a, zip_map(dy, vb, |g, y| g * y));
                }
                if ng(b) {
                    acc(b, zip_map(dy, va, |g, x| g * x));
                }
            }
            &Op::AddRow(a, row) => {
                acc(a, dy.clone());
                if ng(row) {
                    acc(row, column_sums(dy));
                }
            }
            &Op::MulRow(a, row) => {
                let r = val(row).data();
                if ng(a) {
                    let mut g = dy.clone();
                    for i in 0..g.rows() {
                        g.row_mut(i).iter_mut().zip(r).for_each(|(x, s)| *x *= s);
                    }
                    acc(a, g);
                }
                if ng(row) {
                    acc(row, column_sums(&zip_map(dy, val(a), |g, x| g * x)));
                }
            }
            &Op::Scale(a, s) => acc(a, dy.scaled(s)),
            &Op::ScaleBy(a, s) => {
                if ng(a) {
                    acc(a, dy.scaled(val(s).data()[0]));
                }
                if ng(s) {
                    acc(s, Mat::scalar(dot(dy.data(), val(a).data())));
                }
            }
            &Op::Act(a, f) => acc(a, zip_map(dy, val(a), |g, x| g * f.derivative(x))),
            &Op::PRelu(a, slope) => {
                let s = val(slope).data()[0];
                let x = val(a);
                if ng(a) {
                    acc(a, zip_map(dy, x, |g, x| if x > 0.0 { g } else { g * s }));
                }
                if ng(slope) {
                    let ds = dy.data().iter().zip(x.data()).map(|(g, &x)| if x > 0.0 { 0.0 } else { g * x }).sum();
                    acc(slope, Mat::scalar(ds));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let s = dot(yr, dr);
                    for ((o, p), d) in g.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - s);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = xhat.shape();
                if ng(*gamma) {
                    acc(*gamma, column_sums(&zip_map(dy, xhat, |g, h| g * h)));
                }
                if ng(*beta) {
                    acc(*beta, column_sums(dy));
                }
                if ng(*x) {
                    let gm = val(*gamma).data();
                    let mut g = Mat::zeros(m, n);
                    for i in 0..m {
                        let dh: Vec<f64> = dy.row(i).iter().zip(gm).map(|(d, g)| d * g).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dot(&dh, xhat.row(i));
                        let is = inv_std[i];
                        for ((o, d), h) in g.row_mut(i).iter_mut().zip(&dh).zip(xhat.row(i)) {
                            *o = is / n as f64 * (n as f64 * d - sum_dh - h * sum_dh_h);
                        }
                    }
                    acc(*x, g);
                }
            }
            Op::Gather(table, idx) => {
                let t = val(*table);
                let mut g = Mat::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    g.row_mut(i).iter_mut().zip(dy.row(r)).for_each(|(o, d)| *o += d);
                }
                acc(*table, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if ng(p) {
                        let mut g = Mat::zeros(dy.rows(), c);
                        for i in 0..dy.rows() {
                            g.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        acc(p, g);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = dy.cols();
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if ng(p) {
                        acc(p, Mat::from_vec(r, cols, dy.data()[off * cols..(off + r) * cols].to_vec()));
                    }
                    off += r;
                }
            }
            &Op::SliceRows(a, start) => {
                let v = val(a);
                let mut g = Mat::zeros(v.rows(), v.cols());
                let c = v.cols();
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(a, g);
            }
            &Op::SliceCols(a, start) => {
                let v = val(a);
                let mut g = Mat::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    g.row_mut(i)[start..start + dy.cols()].copy_from_slice(dy.row(i));
                }
                acc(a, g);
            }
            &Op::MeanRows(a) => {
                let v = val(a);
                let s = 1.0 / v.rows() as f64;
                let mut g = Mat::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    g.row_mut(i).iter_mut().zip(dy.data()).for_each(|(o, d)| *o = d * s);
                }
                acc(a, g);
            }
            &Op::RowSums(a) => {
                let v = val(a);
                let mut g = Mat::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    let d = dy.data()[i];
                    g.row_mut(i).iter_mut().for_each(|o| *o = d);
                }
                acc(a, g);
            }
            &Op::Sum(a) => {
                let v = val(a);
                acc(a, Mat::filled(v.rows(), v.cols(), dy.data()[0]));
            }
            Op::LogSumExpRows(a, mask) => {
                let v = val(*a);
                let mut g = Mat::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    let lse = node.value.data()[i];
                    let d = dy.data()[i];
                    for (j, (o, x)) in g.row_mut(i).iter_mut().zip(v.row(i)).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            *o = d * (x - lse).exp();
                        }
                    }
                }
                acc(*a, g);
            }
            &Op::Transpose(a) => acc(a, dy.transpose()),
            &Op::SqNorm(a) => acc(a, val(a).scaled(2.0 * dy.data()[0])),
            &Op::Norm(a) => {
                let nrm = node.value.data()[0];
                if nrm > 0.0 {
                    acc(a, val(a).scaled(dy.data()[0] / nrm));
                }
            }
            Op::SelectCols(a, idx) => {
                let v = val(*a);
                let mut g = Mat::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    for (j, &c) in idx.iter().enumerate() {
                        let cur = g.get(i, c);
                        g.set(i, c, cur + dy.get(i, j));
                    }
                }
                acc(*a, g);
            }
        }
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    debug_assert_eq!(a.shape(), b.shape());
    Mat::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn column_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    for i in 0..m.rows() {
        out.data_mut().iter_mut().zip(m.row(i)).for_each(|(o, x)| *o += x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d f / d inputs for a graph builder.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.constant(m.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar_value(l)
        };
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k} elem {e}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn gradients_of_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 4);
        let row = rand_mat(&mut rng, 1, 4);
        let s = Mat::scalar(0.7);
        check(vec![a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.tanh(y);
            t.sum(y)
        });
        check(vec![a.clone(), c.clone()], |t, v| {
            let y = t.matmul_bt(v[0], v[1]);
            let y = t.softmax_rows(y, Some(vec![true, false, true]));
            let w = t.constant(Mat::from_vec(3, 3, (0..9).map(|i| i as f64).collect()));
            let y = t.mul(y, w);
            t.sum(y)
        });
        check(vec![a.clone(), row.clone(), s.clone()], |t, v| {
            let y = t.add_row(v[0], v[1]);
            let y = t.mul_row(y, v[1]);
            let y = t.scale_by(y, v[2]);
            let y = t.prelu(y, v[2]);
            let y = t.act(y, Activation::Gelu);
            let y = t.act(y, Activation::Silu);
            t.squared_norm(y)
        });
        check(vec![a.clone(), row.clone(), rand_mat(&mut rng, 1, 4)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let w = t.constant(Mat::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect()));
            let y = t.mul(y, w);
            t.sum(y)
        });
        check(vec![a.clone(), c.clone()], |t, v| {
            let g = t.gather(v[0], vec![2, 0, 2]);
            let s1 = t.slice_rows(v[1], 1, 2);
            let s2 = t.slice_cols(v[1], 1, 3);
            let cat = t.concat_rows(vec![g, s1]);
            let cc = t.concat_cols(vec![s2, v[0]]);
            let m = t.mean_rows(cat);
            let l = t.log_sum_exp_rows(cc, Some(vec![true, true, false, true, true, true, true]));
            let r = t.transpose(l);
            let n = t.norm(m);
            let sel = t.select_cols(r, vec![0, 2, 2]);
            let d = t.row_dots(v[0], v[1]);
            let a1 = t.sum(sel);
            let a2 = t.sum(d);
            let x = t.add_all(&[a1, a2, n]);
            let y = t.sub(x, n);
            let z = t.scale(y, 1.5);
            t.add(z, n)
        });
    }

    #[test]
    fn parameter_leaves_are_shared() {
        let mut store = ParamStore::new();
        let p = store.add("w", Mat::row_vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let a = t.param(&store, p);
        let b = t.param(&store, p);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let l = t.sum(y);
        let g = t.backward(l);
        assert_eq!(g.params()[0].1.data(), &[2.0, 4.0]);
    }
}
