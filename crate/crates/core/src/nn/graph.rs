//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a reverse topological order; [`Graph::backward`] visits each node once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::params::{ModelParams, ParamId};
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    GroupMax(Var, Vec<usize>),
    GroupSum(Var, usize),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, params: &ModelParams, id: ParamId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf holding a copy of parameter `id`.
    pub fn param(&mut self, params: &ModelParams, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `[n, c] + [1, c]`, the row broadcast used for biases.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `[n, c] * [n, 1]`, scaling each row by its own factor.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Relu(a), &[a])
    }

    /// Softmax along the last axis (per row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|x| x / s));
        }
        debug_assert_eq!(data.len(), ta.rows() * c);
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Concatenates along columns; all inputs need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= ta.rows() {
                return Err(Error::invalid(format!("gather row {r} of {}", ta.rows())));
            }
            data.extend_from_slice(ta.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        self.push(out, Op::Gather(a, rows.to_vec()), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(Error::invalid(format!(
                "column slice {start}..{end} of {} columns",
                ta.cols()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let out = Tensor::matrix(ta.rows(), end - start, data)?;
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        if rows * cols != ta.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let out = ta.clone().reshaped(vec![rows, cols]);
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Column-wise max over consecutive groups of `group` rows: `[n*g, c] -> [n, c]`.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        if group == 0 || !ta.rows().is_multiple_of(group) {
            return Err(Error::invalid(format!(
                "{} rows do not split into groups of {group}",
                ta.rows()
            )));
        }
        let (n, c) = (ta.rows() / group, ta.cols());
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for r in g * group..(g + 1) * group {
                let row = ta.row(r);
                for j in 0..c {
                    if row[j] > data[g * c + j] {
                        data[g * c + j] = row[j];
                        arg[g * c + j] = r;
                    }
                }
            }
        }
        let out = Tensor::matrix(n, c, data)?;
        self.push(out, Op::GroupMax(a, arg), &[a])
    }

    /// Column-wise sum over consecutive groups of `group` rows.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        if group == 0 || !ta.rows().is_multiple_of(group) {
            return Err(Error::invalid(format!(
                "{} rows do not split into groups of {group}",
                ta.rows()
            )));
        }
        let (n, c) = (ta.rows() / group, ta.cols());
        let mut data = vec![0.0; n * c];
        for r in 0..ta.rows() {
            let g = r / group;
            for (o, &x) in data[g * c..(g + 1) * c].iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let out = Tensor::matrix(n, c, data)?;
        self.push(out, Op::GroupSum(a, group), &[a])
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.len().max(1) as f64;
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU
    /// signs, max-pool winners, and gather indices, which carry any
    /// data-dependent neighbour selection). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::GroupMax(_, arg) => arg.hash(&mut h),
                Op::Gather(_, rows) => rows.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut by_param: Vec<Option<Tensor>> = Vec::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(pid) = node.param {
                let slot = pid.index();
                if by_param.len() <= slot {
                    by_param.resize(slot + 1, None);
                }
                match &mut by_param[slot] {
                    Some(acc) => acc.add_assign(&g),
                    empty => *empty = Some(g),
                }
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        Ok(Gradients { by_param })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            empty => *empty = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Result<Tensor> {
            let data = t.data().iter().enumerate().map(|(i, &x)| f(i, x)).collect();
            Tensor::new(t.shape().to_vec(), data)
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, matmul_bt(g, tb));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, matmul_at(ta, g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, &|_, x| -x)?);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, map(g, &|i, x| x * tb.data()[i])?);
                self.accumulate(grads, *b, map(g, &|i, x| x * ta.data()[i])?);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let c = g.cols();
                let mut acc = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, &x) in acc.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                self.accumulate(grads, *row, Tensor::matrix(1, c, acc)?);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let c = ta.cols();
                self.accumulate(grads, *a, map(g, &|i, x| x * tc.data()[i / c])?);
                let dc = (0..ta.rows())
                    .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                    .collect();
                self.accumulate(grads, *col, Tensor::matrix(ta.rows(), 1, dc)?);
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, map(g, &|_, x| x * s)?);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    map(g, &|i, x| if ta.data()[i] > 0.0 { x } else { 0.0 })?,
                );
            }
            Op::Softmax(a) => {
                // dx = y * (g - <g, y>) per row
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *a, Tensor::matrix(out.rows(), c, data)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(tp.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(tp.shape().to_vec(), data)?);
                    }
                    offset += w;
                }
            }
            Op::Gather(a, rows) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut acc = Tensor::zeros(ta.shape());
                let d = acc.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for (s, &x) in d[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                        *s += x;
                    }
                }
                self.accumulate(grads, *a, acc);
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let w = g.cols();
                let mut acc = Tensor::zeros(ta.shape());
                let d = acc.data_mut();
                for r in 0..g.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, acc);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(shape));
            }
            Op::GroupMax(a, arg) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut acc = Tensor::zeros(ta.shape());
                let d = acc.data_mut();
                for (k, (&r, &x)) in arg.iter().zip(g.data()).enumerate() {
                    d[r * c + k % c] += x;
                }
                self.accumulate(grads, *a, acc);
            }
            Op::GroupSum(a, group) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut data = Vec::with_capacity(ta.len());
                for r in 0..ta.rows() {
                    data.extend_from_slice(g.row(r / group));
                }
                debug_assert_eq!(data.len(), ta.rows() * c);
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), data)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / ta.len().max(1) as f64;
                let da = map(ta, &|i, x| k * (x - tb.data()[i]))?;
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, map(&da, &|_, x| -x)?);
                }
                self.accumulate(grads, *a, da);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulCol(..) => "mul_col",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::Concat(..) => "concat",
        Op::Gather(..) => "gather",
        Op::SliceCols(..) => "slice_cols",
        Op::Reshape(..) => "reshape",
        Op::GroupMax(..) => "group_max",
        Op::GroupSum(..) => "group_sum",
        Op::Sum(..) => "sum",
        Op::Mse(..) => "mse",
    }
}
