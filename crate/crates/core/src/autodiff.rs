//! Reverse-mode differentiation over an append-only graph.
//!
//! Values are computed eagerly when a node is added, so every handle refers
//! to an already evaluated tensor. Parents always precede their children in
//! the node list, which makes reverse index order a valid topological order
//! for the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L2Norm,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Reduce {
        kind: Reduction,
        input: Var,
        axis: Option<usize>,
    },
    NormalizeRows(Var),
    LogSoftmaxRows(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph owned by one worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// (outer, len, inner) strides of a reduction over `axis`.
fn reduce_layout(shape: &[usize], axis: Option<usize>) -> (usize, usize, usize, Vec<usize>) {
    match axis {
        None => (1, shape.iter().product(), 1, Vec::new()),
        Some(ax) => {
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape.remove(ax);
            (outer, shape[ax], inner, out_shape)
        }
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        0 => (1, 1),
        1 => (1, t.shape()[0]),
        _ => (t.shape()[0], t.shape()[1]),
    }
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

    /// Adds a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros if nothing reached it yet.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).matmul(self.val(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::Dimension {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.val(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = self.broadcast_binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of a matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        let (rows, cols) = matrix_dims(ta);
        if tr.numel() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| -x);
        self.push(value, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.val(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let value = self.val(a).map(f64::ln);
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.val(a);
        if let Some(ax) = axis {
            if ax >= t.rank() {
                return Err(Error::Dimension {
                    op: "reduce",
                    left: t.shape().to_vec(),
                    right: vec![ax],
                });
            }
        }
        let (outer, len, inner, out_shape) = reduce_layout(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|j| src[o * len * inner + j * inner + i]);
                let v = match kind {
                    Reduction::Sum => lane.sum(),
                    Reduction::Mean => lane.sum::<f64>() / len as f64,
                    Reduction::L2Norm => lane.map(|x| x * x).sum::<f64>().sqrt(),
                    Reduction::Max => lane.fold(f64::NEG_INFINITY, f64::max),
                };
                out.push(v);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { kind, input: a, axis }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a, None).expect("full reduction")
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (rows, cols) = matrix_dims(t);
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::NormalizeRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let (rows, cols) = matrix_dims(t);
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.val(a);
        let (rows, _) = matrix_dims(t);
        if indices.is_empty() {
            return Err(Error::contract("select_rows needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension {
                op: "select_rows",
                left: t.shape().to_vec(),
                right: vec![bad],
            });
        }
        let value = t.select_rows(indices);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows needs at least one part"));
        };
        let cols = matrix_dims(self.val(first)).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            let (r, c) = matrix_dims(t);
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &dy, &mut adj);
            match &mut self.grads[idx] {
                Some(g) => g.add_assign(&dy),
                slot @ None => *slot = Some(dy),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        // Reduces a gradient computed at the output shape back onto a
        // scalar-broadcast operand.
        let fit = |v: Var, g: Tensor| -> Tensor {
            let target = self.val(v);
            if target.shape() == g.shape() {
                g
            } else {
                Tensor::filled(target.shape(), g.data().iter().sum())
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = dy.matmul(&tb.transpose().expect("rank 2")).expect("shapes");
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = ta.transpose().expect("rank 2").matmul(dy).expect("shapes");
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => send(*a, dy.transpose().expect("rank 2")),
            Op::Add(a, b) => {
                send(*a, fit(*a, dy.clone()));
                send(*b, fit(*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                send(*a, fit(*a, dy.clone()));
                send(*b, fit(*b, dy.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = zip_broadcast(dy, tb, |g, y| g * y);
                let gb = zip_broadcast(dy, ta, |g, x| g * x);
                send(*a, fit(*a, ga));
                send(*b, fit(*b, gb));
            }
            Op::Div(a, b) => {
                let tb = self.val(*b);
                let ga = zip_broadcast(dy, tb, |g, d| g / d);
                // d(a/b)/db = -(a/b)/b = -y/b
                let y_over_b = zip_broadcast(y, tb, |q, d| q / d);
                let gb = zip_broadcast(dy, &y_over_b, |g, v| -g * v);
                send(*a, fit(*a, ga));
                send(*b, fit(*b, gb));
            }
            Op::AddRow(a, row) => {
                send(*a, dy.clone());
                let (rows, cols) = matrix_dims(dy);
                let mut g = vec![0.0; cols];
                for r in 0..rows {
                    for (acc, v) in g.iter_mut().zip(&dy.data()[r * cols..(r + 1) * cols]) {
                        *acc += v;
                    }
                }
                let shape = self.val(*row).shape().to_vec();
                send(*row, Tensor::new(shape, g).expect("row shape"));
            }
            Op::Neg(a) => send(*a, dy.map(|g| -g)),
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, dy.map(|g| c * g))
            }
            Op::Exp(a) => send(*a, zip_same(dy, y, |g, e| g * e)),
            Op::Log(a) => send(*a, zip_same(dy, self.val(*a), |g, x| g / x)),
            Op::Relu(a) => send(
                *a,
                zip_same(dy, self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Abs(a) => send(
                *a,
                zip_same(dy, self.val(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(a) => send(*a, zip_same(dy, self.val(*a), |g, x| 2.0 * g * x)),
            Op::Reduce { kind, input, axis } => {
                let tx = self.val(*input);
                let (outer, len, inner, _) = reduce_layout(tx.shape(), *axis);
                let x = tx.data();
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let out_idx = o * inner + i;
                        let up = dy.data()[out_idx];
                        let at = |j: usize| o * len * inner + j * inner + i;
                        match kind {
                            Reduction::Sum => (0..len).for_each(|j| g[at(j)] = up),
                            Reduction::Mean => {
                                (0..len).for_each(|j| g[at(j)] = up / len as f64)
                            }
                            Reduction::L2Norm => {
                                let n = y.data()[out_idx];
                                if n > 0.0 {
                                    (0..len).for_each(|j| g[at(j)] = up * x[at(j)] / n);
                                }
                            }
                            Reduction::Max => {
                                let m = y.data()[out_idx];
                                if let Some(j) = (0..len).find(|&j| x[at(j)] == m) {
                                    g[at(j)] = up;
                                }
                            }
                        }
                    }
                }
                send(*input, Tensor::new(tx.shape().to_vec(), g).expect("shape"));
            }
            Op::NormalizeRows(a) => {
                let tx = self.val(*a);
                let (rows, cols) = matrix_dims(tx);
                let mut g = vec![0.0; tx.numel()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let x = &tx.data()[span.clone()];
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[span.clone()];
                    let dr = &dy.data()[span.clone()];
                    let proj: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] = (dr[c] - yr[c] * proj) / n;
                    }
                }
                send(*a, Tensor::new(tx.shape().to_vec(), g).expect("shape"));
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = matrix_dims(y);
                let mut g = vec![0.0; y.numel()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dr = &dy.data()[span.clone()];
                    let total: f64 = dr.iter().sum();
                    for (c, &ly) in y.data()[span].iter().enumerate() {
                        g[r * cols + c] = dr[c] - ly.exp() * total;
                    }
                }
                send(*a, Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::SelectRows(a, indices) => {
                let tx = self.val(*a);
                let cols = matrix_dims(tx).1;
                let mut g = vec![0.0; tx.numel()];
                for (k, &src) in indices.iter().enumerate() {
                    for c in 0..cols {
                        g[src * cols + c] += dy.data()[k * cols + c];
                    }
                }
                send(*a, Tensor::new(tx.shape().to_vec(), g).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.val(p);
                    let n = tp.numel();
                    let g = dy.data()[offset..offset + n].to_vec();
                    offset += n;
                    send(p, Tensor::new(tp.shape().to_vec(), g).expect("shape"));
                }
            }
        }
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Applies `f(grad, other)` where `other` is either same-shaped or a scalar.
fn zip_broadcast(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.shape() == g.shape() {
        zip_same(g, other, f)
    } else if other.is_scalar() {
        let v = other.item();
        g.map(|x| f(x, v))
    } else {
        // `g` is the scalar side; result takes the shape of `other`.
        let gv = g.item();
        other.map(|v| f(gv, v))
    }
}
