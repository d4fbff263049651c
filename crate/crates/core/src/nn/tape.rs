//! Reverse-mode automatic differentiation on a flat tape of 2-D tensors.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse creation order. Nodes that do not depend on a
//! leaf created with `requires_grad` are skipped during the backward pass.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{primitive_distance, primitive_distance_grad, Point3, PrimitiveKind};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowNorm(Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Sum(Var),
    Mean(Var),
    MinCols(Var, Vec<usize>),
    SoftMinCols(Var, f64),
    GatherRows(Var, Vec<usize>),
    SoftClamp { a: Var, mask: Vec<bool>, limit: f64 },
    PrimitiveDistances { attrs: Var, kind: PrimitiveKind, points: Vec<Point3>, owner: Vec<usize> },
    FineLoss { d: Var, target: Vec<f64>, delta: f64 },
    CoarseLoss { d: Var, target: Vec<f64> },
    MaxScalar(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::DimensionMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// Truncated fine loss for one sample.
pub fn fine_loss_value(d: f64, s: f64, delta: f64) -> f64 {
    if s < -delta {
        d.max(-delta) + delta
    } else if s > delta {
        delta - d.min(delta)
    } else {
        (d - s).abs()
    }
}

fn fine_loss_slope(d: f64, s: f64, delta: f64) -> f64 {
    if s < -delta {
        if d > -delta {
            1.0
        } else {
            0.0
        }
    } else if s > delta {
        if d < delta {
            -1.0
        } else {
            0.0
        }
    } else {
        sign0(d - s)
    }
}

/// Coarse loss: truncated inside the shape only.
pub fn coarse_loss_value(d: f64, s: f64) -> f64 {
    if s < 0.0 {
        d.max(0.0)
    } else {
        (d - s).abs()
    }
}

fn coarse_loss_slope(d: f64, s: f64) -> f64 {
    if s < 0.0 {
        if d > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        sign0(d - s)
    }
}

/// Sign with the zero subgradient at 0.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`; `None` for
    /// nodes that do not depend on any trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Autodiff("tape already differentiated; build a new one".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul_t(self.val(a), self.val(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch("add_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_slice_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.val(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.val(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical("log of a non-positive value".into()));
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.val(*first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.val(p).rows() != rows {
                return Err(mismatch("concat_cols", self.val(*first).shape(), self.val(p).shape()));
            }
            cols += self.val(p).cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = out.row_slice_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row_slice(r);
                row[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        if start >= end || end > ta.cols() {
            return Err(Error::DimensionMismatch(format!(
                "columns {start}..{end} of a {:?} tensor",
                ta.shape()
            )));
        }
        let out = Tensor::from_fn(ta.rows(), end - start, |r, c| ta.get(r, start + c));
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Euclidean norm of each row, as a column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let out = Tensor::column((0..ta.rows()).map(|r| l2(ta.row_slice(r))).collect());
        let rg = self.rg(a);
        self.push(out, Op::RowNorm(a), rg)
    }

    fn col_op(&mut self, a: Var, c: Var, name: &str, divide: bool) -> Result<Var> {
        let (ta, tc) = (self.val(a), self.val(c));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(mismatch(name, ta.shape(), tc.shape()));
        }
        if divide && tc.data().iter().any(|&x| x == 0.0) {
            return Err(Error::Numerical(format!("{name}: division by zero")));
        }
        let out = Tensor::from_fn(ta.rows(), ta.cols(), |r, k| {
            let s = tc.get(r, 0);
            if divide {
                ta.get(r, k) / s
            } else {
                ta.get(r, k) * s
            }
        });
        let rg = self.rg(a) || self.rg(c);
        let op = if divide { Op::DivCol(a, c) } else { Op::MulCol(a, c) };
        self.push(out, op, rg)
    }

    /// Scales row `r` of `a` by `c[r]` for a column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op(a, c, "mul_col", false)
    }

    /// Divides row `r` of `a` by `c[r]` for a column `c`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_op(a, c, "div_col", true)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        if ta.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = ta.sum() / ta.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Row-wise minimum as a column. The gradient goes to the first minimal
    /// entry of each row.
    pub fn min_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        if ta.cols() == 0 {
            return Err(Error::invalid("min over zero columns"));
        }
        let mut arg = Vec::with_capacity(ta.rows());
        let mut vals = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let row = ta.row_slice(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = k;
                }
            }
            arg.push(best);
            vals.push(row[best]);
        }
        let rg = self.rg(a);
        self.push(Tensor::column(vals), Op::MinCols(a, arg), rg)
    }

    /// Row-wise `-t log sum exp(-x / t)` as a column.
    pub fn soft_min_cols(&mut self, a: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("soft-min temperature {t} must be positive")));
        }
        let ta = self.val(a);
        if ta.cols() == 0 {
            return Err(Error::invalid("soft-min over zero columns"));
        }
        let vals = (0..ta.rows())
            .map(|r| {
                let row = ta.row_slice(r);
                let m = row.iter().copied().fold(f64::INFINITY, f64::min);
                let s: f64 = row.iter().map(|v| (-(v - m) / t).exp()).sum();
                m - t * s.ln()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(vals), Op::SoftMinCols(a, t), rg)
    }

    /// Row `index[i]` of `a` becomes row `i` of the output.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let ta = self.val(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::invalid(format!("row {bad} out of range for {:?}", ta.shape())));
        }
        let cols = ta.cols();
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &src) in index.iter().enumerate() {
            out.row_slice_mut(i).copy_from_slice(ta.row_slice(src));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, index), rg)
    }

    /// `limit * tanh(x / limit)` on columns whose `mask[c % mask.len()]` is
    /// set; other columns pass through.
    pub fn soft_clamp(&mut self, a: Var, mask: &[bool], limit: f64) -> Result<Var> {
        let ta = self.val(a);
        if mask.is_empty() || ta.cols() % mask.len() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "clamp mask of length {} over {} columns",
                mask.len(),
                ta.cols()
            )));
        }
        let out = Tensor::from_fn(ta.rows(), ta.cols(), |r, c| {
            let x = ta.get(r, c);
            if mask[c % mask.len()] {
                limit * (x / limit).tanh()
            } else {
                x
            }
        });
        let rg = self.rg(a);
        self.push(
            out,
            Op::SoftClamp {
                a,
                mask: mask.to_vec(),
                limit,
            },
            rg,
        )
    }

    /// Distances from each point to every primitive of its owning row of
    /// `attrs` (`B x N*k`). Output is `points.len() x N`.
    pub fn primitive_distances(
        &mut self,
        attrs: Var,
        kind: PrimitiveKind,
        points: Vec<Point3>,
        owner: Vec<usize>,
    ) -> Result<Var> {
        let ta = self.val(attrs);
        let k = kind.arity();
        if ta.cols() == 0 || ta.cols() % k != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} attribute columns for {kind} primitives",
                ta.cols()
            )));
        }
        if points.len() != owner.len() || owner.iter().any(|&o| o >= ta.rows()) {
            return Err(Error::invalid("point owners do not match the attribute rows"));
        }
        let n = ta.cols() / k;
        let mut out = Tensor::zeros(points.len(), n);
        for (r, (&p, &o)) in points.iter().zip(&owner).enumerate() {
            let row = ta.row_slice(o);
            let dst = out.row_slice_mut(r);
            for i in 0..n {
                dst[i] = primitive_distance(kind, &row[i * k..(i + 1) * k], p);
            }
        }
        let rg = self.rg(attrs);
        self.push(
            out,
            Op::PrimitiveDistances {
                attrs,
                kind,
                points,
                owner,
            },
            rg,
        )
    }

    /// Per-sample truncated fine loss of predictions `d` (a column) against
    /// `target`.
    pub fn fine_loss(&mut self, d: Var, target: Vec<f64>, delta: f64) -> Result<Var> {
        let td = self.val(d);
        if td.cols() != 1 || td.rows() != target.len() {
            return Err(mismatch("fine_loss", td.shape(), (target.len(), 1)));
        }
        let out = Tensor::column(
            td.data()
                .iter()
                .zip(&target)
                .map(|(&x, &s)| fine_loss_value(x, s, delta))
                .collect(),
        );
        let rg = self.rg(d);
        self.push(out, Op::FineLoss { d, target, delta }, rg)
    }

    /// Per-sample coarse loss of predictions `d` (a column) against `target`.
    pub fn coarse_loss(&mut self, d: Var, target: Vec<f64>) -> Result<Var> {
        let td = self.val(d);
        if td.cols() != 1 || td.rows() != target.len() {
            return Err(mismatch("coarse_loss", td.shape(), (target.len(), 1)));
        }
        let out = Tensor::column(
            td.data()
                .iter()
                .zip(&target)
                .map(|(&x, &s)| coarse_loss_value(x, s))
                .collect(),
        );
        let rg = self.rg(d);
        self.push(out, Op::CoarseLoss { d, target }, rg)
    }

    /// `max(x, floor)` elementwise; no gradient where `x <= floor`.
    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, |x| x.max(floor), Op::MaxScalar(a, floor))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Autodiff(format!("backward from a non-scalar of shape {shape:?}")));
        }
        self.backward_from(loss, Tensor::scalar(1.0))
    }

    /// Back-propagates an upstream gradient `seed` (same shape as `root`).
    /// The tape can be differentiated once; the graph is released afterwards.
    pub fn backward_from(&mut self, root: Var, seed: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice on the same graph".into()));
        }
        if seed.shape() != self.val(root).shape() {
            return Err(mismatch("backward seed", seed.shape(), self.val(root).shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            self.release();
            return Ok(());
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.release();
        Ok(())
    }

    fn release(&mut self) {
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Like `accumulate` but hands the caller the buffer to add into.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // d a = g * b   (m x n)(n x k)
                self.accumulate_with(grads, *a, |ga| {
                    gemm(m, n, k, 1.0, g.data(), n, false, tb.data(), k, false, 1.0, ga.data_mut());
                });
                // d b = g^T * a (n x m)(m x k)
                self.accumulate_with(grads, *b, |gb| {
                    gemm(n, m, k, 1.0, g.data(), n, true, ta.data(), k, false, 1.0, gb.data_mut());
                });
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, || zip_map(g, tb, |x, y| x * y));
                self.accumulate(grads, *b, || zip_map(g, ta, |x, y| x * y));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, || g.map(|x| x * k)),
            Op::AddScalar(a) => self.accumulate(grads, *a, || g.clone()),
            Op::Relu(a) => {
                let ta = self.val(*a);
                self.accumulate(grads, *a, || zip_map(g, ta, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Tanh(a) => self.accumulate(grads, *a, || zip_map(g, out, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => self.accumulate(grads, *a, || zip_map(g, out, |x, y| x * y)),
            Op::Log(a) => {
                let ta = self.val(*a);
                self.accumulate(grads, *a, || zip_map(g, ta, |x, y| x / y));
            }
            Op::Abs(a) => {
                let ta = self.val(*a);
                self.accumulate(grads, *a, || zip_map(g, ta, |x, y| x * sign0(y)));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    self.accumulate(grads, p, || Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c)));
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_slice_mut(r)[start..start + g.cols()];
                        for (d, &v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let ta = self.val(*a);
                self.accumulate(grads, *a, || {
                    Tensor::from_fn(ta.rows(), ta.cols(), |r, c| {
                        let n = out.get(r, 0);
                        if n > 0.0 {
                            g.get(r, 0) * ta.get(r, c) / n
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.val(*a), self.val(*c));
                self.accumulate(grads, *a, || Tensor::from_fn(ta.rows(), ta.cols(), |r, k| g.get(r, k) * tc.get(r, 0)));
                self.accumulate(grads, *c, || {
                    Tensor::column(
                        (0..ta.rows())
                            .map(|r| dot(g.row_slice(r), ta.row_slice(r)))
                            .collect(),
                    )
                });
            }
            Op::DivCol(a, c) => {
                let (ta, tc) = (self.val(*a), self.val(*c));
                self.accumulate(grads, *a, || Tensor::from_fn(ta.rows(), ta.cols(), |r, k| g.get(r, k) / tc.get(r, 0)));
                self.accumulate(grads, *c, || {
                    Tensor::column(
                        (0..ta.rows())
                            .map(|r| {
                                let s = tc.get(r, 0);
                                -dot(g.row_slice(r), ta.row_slice(r)) / (s * s)
                            })
                            .collect(),
                    )
                });
            }
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                self.accumulate(grads, *a, || Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.val(*a).shape();
                let v = g.item() / (r * c) as f64;
                self.accumulate(grads, *a, || Tensor::filled(r, c, v));
            }
            Op::MinCols(a, arg) => {
                self.accumulate_with(grads, *a, |ga| {
                    for (r, &k) in arg.iter().enumerate() {
                        let cols = ga.cols();
                        ga.data_mut()[r * cols + k] += g.get(r, 0);
                    }
                });
            }
            Op::SoftMinCols(a, t) => {
                let ta = self.val(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..ta.rows() {
                        let row = ta.row_slice(r);
                        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
                        let w: Vec<f64> = row.iter().map(|v| (-(v - m) / t).exp()).collect();
                        let s: f64 = w.iter().sum();
                        let gr = g.get(r, 0);
                        for (d, wi) in ga.row_slice_mut(r).iter_mut().zip(&w) {
                            *d += gr * wi / s;
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => {
                self.accumulate_with(grads, *a, |ga| {
                    for (i, &src) in index.iter().enumerate() {
                        for (d, &v) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(i)) {
                            *d += v;
                        }
                    }
                });
            }
            Op::SoftClamp { a, mask, limit } => {
                let cols = out.cols();
                self.accumulate(grads, *a, || {
                    Tensor::from_fn(out.rows(), cols, |r, c| {
                        if mask[c % mask.len()] {
                            let y = out.get(r, c) / limit;
                            g.get(r, c) * (1.0 - y * y)
                        } else {
                            g.get(r, c)
                        }
                    })
                });
            }
            Op::PrimitiveDistances {
                attrs,
                kind,
                points,
                owner,
            } => {
                let ta = self.val(*attrs);
                let k = kind.arity();
                let n = out.cols();
                let mut local = vec![0.0; k];
                self.accumulate_with(grads, *attrs, |ga| {
                    for (r, (&p, &o)) in points.iter().zip(owner).enumerate() {
                        let row = ta.row_slice(o);
                        let gr = g.row_slice(r);
                        for prim in 0..n {
                            let up = gr[prim];
                            if up == 0.0 {
                                continue;
                            }
                            primitive_distance_grad(*kind, &row[prim * k..(prim + 1) * k], p, &mut local);
                            let dst = &mut ga.row_slice_mut(o)[prim * k..(prim + 1) * k];
                            for (d, &l) in dst.iter_mut().zip(&local) {
                                *d += up * l;
                            }
                        }
                    }
                });
            }
            Op::FineLoss { d, target, delta } => {
                let td = self.val(*d);
                self.accumulate(grads, *d, || {
                    Tensor::column(
                        (0..target.len())
                            .map(|r| g.get(r, 0) * fine_loss_slope(td.get(r, 0), target[r], *delta))
                            .collect(),
                    )
                });
            }
            Op::CoarseLoss { d, target } => {
                let td = self.val(*d);
                self.accumulate(grads, *d, || {
                    Tensor::column(
                        (0..target.len())
                            .map(|r| g.get(r, 0) * coarse_loss_slope(td.get(r, 0), target[r]))
                            .collect(),
                    )
                });
            }
            Op::MaxScalar(a, floor) => {
                let ta = self.val(*a);
                self.accumulate(grads, *a, || zip_map(g, ta, |x, y| if y > *floor { x } else { 0.0 }));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.rows(), a.cols(), |r, c| f(a.get(r, c), b.get(r, c)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
