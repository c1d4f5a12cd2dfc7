//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in execution order, so the record is topologically sorted by
//! construction. [`Graph::backward`] walks the record once in reverse and
//! accumulates into input gradients in that fixed order, which makes the
//! resulting gradients bitwise reproducible.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of the tracked leaves of a graph, keyed by leaf handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of a tracked leaf. Leaves the root does not depend on get a
    /// zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Ordered record of primitive applications built during a forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| Error::dim(op, t.shape(), &[0, 0]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient is produced for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a gradient-tracked leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (k2, n) = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a), "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(Op::Transpose(a), value, &[a]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op_name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = shape2(self.value(x), op_name)?;
        let r = self.value(row);
        if r.shape() != [n] {
            return Err(Error::dim(op_name, self.value(x).shape(), r.shape()));
        }
        let xs = self.value(x).data();
        let rs = r.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xs[i * n..(i + 1) * n].iter().zip(rs).map(|(&a, &b)| f(a, b)));
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(op, value, &[x, row]))
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x[m×n] ⊙ row[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(op, value, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m), &[x])
    }

    fn check_finite(&self, x: Var, op: &str) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain(format!("NaN input to {op}")));
        }
        Ok(())
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax_rows")?;
        let (m, n) = shape2(self.value(x), "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x).data(), m, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::SoftmaxRows(x), value, &[x]))
    }

    /// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax_rows")?;
        let (m, n) = shape2(self.value(x), "log_softmax_rows")?;
        let out = kernels::log_softmax_rows(self.value(x).data(), m, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::LogSoftmaxRows(x), value, &[x]))
    }

    /// Per-row `(x − mean)/sqrt(var + eps) · gain + bias` with population variance.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (m, n) = shape2(self.value(x), "layer_norm_rows")?;
        for p in [gain, bias] {
            if self.value(p).shape() != [n] {
                return Err(Error::dim("layer_norm_rows", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let (normed, rstd) = kernels::normalize_rows(self.value(x).data(), m, n, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &normed[i * n..(i + 1) * n];
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b));
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            value,
            &[x, gain, bias],
        ))
    }

    /// Scales each row to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("l2_normalize eps must be positive"));
        }
        let (m, n) = shape2(self.value(x), "l2_normalize_rows")?;
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            out.extend(row.iter().map(|v| v / denom));
            norms.push(norm);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::L2NormalizeRows { x, eps, norms }, value, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let (_, n) = shape2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, n, out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let (m, _) = shape2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.value(x).shape(), &[start, len]));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, out)?;
        Ok(self.push(Op::SliceRows { x, start }, value, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.value(x).shape(), &[start, len]));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, out)?;
        Ok(self.push(Op::SliceCols { x, start }, value, &[x]))
    }

    /// Row lookup `table[ids[i]]`, the embedding-table gather.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = shape2(self.value(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Lookup(format!("row {bad} outside table of {v} rows")));
        }
        let ts = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(&ts[id * n..(id + 1) * n]);
        }
        let value = Tensor::matrix(ids.len(), n, out)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        ))
    }

    /// `out[i] = x[i][cols[i]]`, one entry per row.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "pick")?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::dim("pick", self.value(x).shape(), &[cols.len()]));
        }
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.value(x).data()[i * n + c])
            .collect();
        let value = Tensor::vector(out)?;
        Ok(self.push(
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            value,
            &[x],
        ))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Returns `∂root/∂leaf` for every gradient-tracked leaf recorded before
    /// the root. Nodes are visited exactly once, newest first.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not part of this graph"));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let tracked = |v: Var| nodes[v.0].requires_grad;

        // Lazily allocates the gradient buffer of `v` and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("checked in forward");
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    let da = kernels::matmul_nt(dy, val(*b).data(), m, n, k);
                    acc(*a, &mut |g| kernels::add_assign(g, &da));
                }
                if tracked(*b) {
                    let db = kernels::matmul_tn(val(*a).data(), dy, m, k, n);
                    acc(*b, &mut |g| kernels::add_assign(g, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2().expect("checked in forward");
                let da = kernels::transpose(dy, n, m);
                acc(*a, &mut |g| kernels::add_assign(g, &da));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::add_assign(g, dy));
                acc(*b, &mut |g| kernels::add_assign(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| kernels::add_assign(g, dy));
                acc(*b, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *gi += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (((gi, d), x), y) in g.iter_mut().zip(dy).zip(av).zip(bv) {
                        *gi -= d * x / (y * y);
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                acc(*x, &mut |g| kernels::add_assign(g, dy));
                acc(*row, &mut |g| {
                    for chunk in dy.chunks(n) {
                        kernels::add_assign(g, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let n = val(*row).len();
                let (xv, rv) = (val(*x).data(), val(*row).data());
                acc(*x, &mut |g| {
                    for (i, (gi, d)) in g.iter_mut().zip(dy).enumerate() {
                        *gi += d * rv[i % n];
                    }
                });
                acc(*row, &mut |g| {
                    for (i, (d, xi)) in dy.iter().zip(xv).enumerate() {
                        g[i % n] += d * xi;
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d * s;
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |g| kernels::add_assign(g, dy)),
            Op::Exp(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(yv) {
                        *gi += d * y;
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(xv) {
                        *gi += d / x;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(xv) {
                        *gi += d * kernels::gelu_grad(*x);
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += d));
            }
            Op::Mean(x) => {
                let d = dy[0] / val(*x).len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += d));
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((gi, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += y * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for ((gi, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += d - y.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                acc(*x, &mut |g| {
                    for (i, ((gr, dr), hr)) in g
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(normed.chunks(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = dr.iter().zip(gv).map(|(d, g)| d * g).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((gi, d), h) in gr.iter_mut().zip(&dh).zip(hr) {
                            *gi += rstd[i] * (d - mean_dh - h * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dr, hr) in dy.chunks(n).zip(normed.chunks(n)) {
                        for ((gi, d), h) in g.iter_mut().zip(dr).zip(hr) {
                            *gi += d * h;
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dr in dy.chunks(n) {
                        kernels::add_assign(g, dr);
                    }
                });
            }
            Op::L2NormalizeRows { x, eps, norms } => {
                let n = node.value.shape()[1];
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for (i, ((gr, dr), yr)) in g
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(yv.chunks(n))
                        .enumerate()
                    {
                        if norms[i] < *eps {
                            for (gi, d) in gr.iter_mut().zip(dr) {
                                *gi += d / eps;
                            }
                        } else {
                            let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                            for ((gi, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                                *gi += (d - y * dot) / norms[i];
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let slice = &dy[offset..offset + len];
                    acc(p, &mut |g| kernels::add_assign(g, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    acc(p, &mut |g| {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            kernels::add_assign(gr, &dr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape()[1];
                acc(*x, &mut |g| {
                    kernels::add_assign(&mut g[start * n..start * n + dy.len()], dy);
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.shape()[1];
                let n = val(*x).shape()[1];
                acc(*x, &mut |g| {
                    for (gr, dr) in g.chunks_mut(n).zip(dy.chunks(w)) {
                        kernels::add_assign(&mut gr[*start..start + w], dr);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.shape()[1];
                acc(*table, &mut |g| {
                    for (&id, dr) in ids.iter().zip(dy.chunks(n)) {
                        kernels::add_assign(&mut g[id * n..(id + 1) * n], dr);
                    }
                });
            }
            Op::Pick { x, cols } => {
                let n = val(*x).shape()[1];
                acc(*x, &mut |g| {
                    for (i, (&c, d)) in cols.iter().zip(dy).enumerate() {
                        g[i * n + c] += d;
                    }
                });
            }
        }
    }
}
