//! Reverse-mode differentiation over a linear tape of dense matrix ops.
//!
//! Every op appends one node whose parents are already on the tape, so the
//! node order is a topological order and the backward sweep is a single
//! reverse pass. A tape supports one backward pass; call [`Tape::reset`] to
//! reuse the allocation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Square,
    /// `max(x, 0)` with subgradient 0 at the kink.
    Hinge,
    Log,
    Exp,
    Abs,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, c)`; gradient passes only where `x > c`.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    /// Elementwise minimum; ties route the gradient to the left operand.
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Mean over strictly positive entries; 0 when there are none.
    MeanNonzero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce everything to 1×1.
    All,
    /// Reduce each row to one value, giving n×1.
    Rows,
    /// Reduce each column to one value, giving 1×m.
    Cols,
}

impl Axis {
    fn out_shape(self, (n, m): (usize, usize)) -> (usize, usize) {
        match self {
            Axis::All => (1, 1),
            Axis::Rows => (n, 1),
            Axis::Cols => (1, m),
        }
    }

    #[inline]
    fn slot(self, i: usize, j: usize) -> usize {
        match self {
            Axis::All => 0,
            Axis::Rows => i,
            Axis::Cols => j,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    AddRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Reduce(usize, Reduce, Axis),
    RowNorm(usize),
    Softmax(usize),
    RowMax(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<(usize, usize)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads[v.idx].as_ref()
    }

    /// Gradient for `v`, materialising zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drop all nodes. Existing `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    #[inline]
    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used on a different tape");
        v.idx
    }

    #[inline]
    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Differentiable leaf (parameter or input we want the gradient of).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s current value as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(self.check(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let out = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMulT(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let out = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        self.push(out, Op::Transpose(ia), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let out = match kind {
            Unary::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
            Unary::Square => x.map(|v| v * v),
            Unary::Hinge => x.map(|v| v.max(0.0)),
            Unary::Log => {
                if let Some(&bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain { op: "log", value: bad });
                }
                x.map(f64::ln)
            }
            Unary::Exp => x.map(f64::exp),
            Unary::Abs => x.map(f64::abs),
            Unary::Scale(c) => x.map(|v| c * v),
            Unary::AddScalar(c) => x.map(|v| v + c),
            Unary::ClampMin(c) => x.map(|v| v.max(c)),
        };
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Unary(ia, kind), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope)).expect("infallible")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square).expect("infallible")
    }

    pub fn hinge(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Hinge).expect("infallible")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("infallible")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs).expect("infallible")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Scale(c)).expect("infallible")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::AddScalar(c)).expect("infallible")
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::ClampMin(c)).expect("infallible")
    }

    /// Elementwise binary op. Shapes must match, or one side must be 1×1.
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Min => p.min(q),
        };
        let out = if x.shape() == y.shape() {
            x.zip_map(y, f)
        } else if y.shape() == (1, 1) {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.shape() == (1, 1) {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(dim_err("elementwise", x, y));
        };
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Binary(ia, ib, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    /// `a + row`, broadcasting a 1×m row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a), self.check(row));
        let (x, r) = (&self.nodes[ia].value, &self.nodes[ir].value);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(dim_err("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(ia) || self.rg(ir);
        Ok(self.push(out, Op::AddRow(ia, ir), rg))
    }

    /// `a * col`, broadcasting an n×1 column across the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.check(a), self.check(col));
        let (x, c) = (&self.nodes[ia].value, &self.nodes[ic].value);
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(dim_err("mul_col", x, c));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(ia) || self.rg(ic);
        Ok(self.push(out, Op::MulCol(ia, ic), rg))
    }

    /// `a / col`, broadcasting an n×1 column across the columns of `a`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.check(a), self.check(col));
        let (x, c) = (&self.nodes[ia].value, &self.nodes[ic].value);
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(dim_err("div_col", x, c));
        }
        if let Some(&bad) = c.data().iter().find(|v| **v == 0.0) {
            return Err(Error::Domain {
                op: "div_col",
                value: bad,
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(ia) || self.rg(ic);
        Ok(self.push(out, Op::DivCol(ia, ic), rg))
    }

    pub fn reduce(&mut self, a: Var, kind: Reduce, axis: Axis) -> Var {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let (r, c) = axis.out_shape(x.shape());
        let mut sums = vec![0.0; r * c];
        let mut counts = vec![0usize; r * c];
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                let s = axis.slot(i, j);
                match kind {
                    Reduce::MeanNonzero => {
                        if v > 0.0 {
                            sums[s] += v;
                            counts[s] += 1;
                        }
                    }
                    _ => {
                        sums[s] += v;
                        counts[s] += 1;
                    }
                }
            }
        }
        let data = match kind {
            Reduce::Sum => sums,
            Reduce::Mean | Reduce::MeanNonzero => sums
                .iter()
                .zip(&counts)
                .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                .collect(),
        };
        let out = Tensor::new(r, c, data).expect("shape");
        let rg = self.rg(ia);
        self.push(out, Op::Reduce(ia, kind, axis), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Reduce::Sum, Axis::All)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Reduce::Mean, Axis::All)
    }

    pub fn mean_nonzero(&mut self, a: Var) -> Var {
        self.reduce(a, Reduce::MeanNonzero, Axis::All)
    }

    /// Per-row L2 norm, n×1.
    pub fn rows_l2_norm(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let out = Tensor::new(x.rows(), 1, x.row_norms()).expect("shape");
        let rg = self.rg(ia);
        self.push(out, Op::RowNorm(ia), rg)
    }

    /// Rows scaled to unit L2 norm. Errors on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.rows_l2_norm(a);
        if self.value(n).data().iter().any(|v| *v == 0.0) {
            return Err(Error::DegenerateVector("normalize_rows"));
        }
        self.div_col(a, n)
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = if a == b { an } else { self.normalize_rows(b)? };
        self.matmul_t(an, bn)
    }

    /// Row-wise softmax. Entries where `exclude` is true are forced to exactly 0
    /// and receive no gradient; their input values are ignored.
    pub fn softmax_rows(&mut self, a: Var, exclude: Option<&[bool]>) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        if let Some(m) = exclude {
            if m.len() != x.len() {
                return Err(Error::Dimension {
                    op: "softmax_rows mask",
                    left: x.shape(),
                    right: (m.len(), 1),
                });
            }
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(x.rows(), cols);
        for i in 0..x.rows() {
            let keep = |j: usize| exclude.is_none_or(|m| !m[i * cols + j]);
            let row = x.row(i);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: i });
            }
            let orow = out.row_mut(i);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Softmax(ia), rg))
    }

    /// Per-row maximum over entries not excluded, n×1. The gradient flows to
    /// the first maximising entry.
    pub fn row_max(&mut self, a: Var, exclude: Option<&[bool]>) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let cols = x.cols();
        let mut arg = Vec::with_capacity(x.rows());
        let mut vals = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in x.row(i).iter().enumerate() {
                if exclude.is_some_and(|m| m[i * cols + j]) {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.ok_or(Error::DegenerateRow { row: i })?;
            arg.push(j);
            vals.push(v);
        }
        let out = Tensor::new(x.rows(), 1, vals).expect("shape");
        let rg = self.rg(ia);
        Ok(self.push(out, Op::RowMax(ia, arg), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let first = &self.nodes[idx[0]].value;
        let rows = first.rows();
        for &i in &idx[1..] {
            if self.nodes[i].value.rows() != rows {
                return Err(dim_err("concat_cols", first, &self.nodes[i].value));
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let out = Tensor::new(rows, cols, data).expect("shape");
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let first = &self.nodes[idx[0]].value;
        let cols = first.cols();
        for &i in &idx[1..] {
            if self.nodes[i].value.cols() != cols {
                return Err(dim_err("concat_rows", first, &self.nodes[i].value));
            }
        }
        let rows: usize = idx.iter().map(|&i| self.nodes[i].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &i in &idx {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let out = Tensor::new(rows, cols, data).expect("shape");
        Ok(self.push(out, Op::ConcatRows(idx), rg))
    }

    /// Gather rows by index; repeats are allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::contract(format!(
                "select_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(rows);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SelectRows(ia, rows.to_vec()), rg))
    }

    /// Gather individual entries into a column vector (len×1).
    pub fn gather(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let mut vals = Vec::with_capacity(entries.len());
        for &(r, c) in &entries {
            if r >= x.rows() || c >= x.cols() {
                return Err(Error::contract(format!(
                    "gather index ({r}, {c}) out of range for {:?}",
                    x.shape()
                )));
            }
            vals.push(x.get(r, c));
        }
        let out = Tensor::new(vals.len(), 1, vals).expect("shape");
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Gather(ia, entries), rg))
    }

    /// Reverse sweep from a 1×1 loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss);
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if self.consumed {
            return Err(Error::contract("backward already run on this tape; reset it first"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::scalar(1.0));

        for idx in (0..=il).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only report gradients for nodes that take part in differentiation.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let y = &nodes[idx].value;
        let mut acc = |target: usize, delta: Tensor| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if nodes[*a].requires_grad {
                    acc(*a, g.matmul_t(vb).expect("shape"));
                }
                if nodes[*b].requires_grad {
                    acc(*b, va.t_matmul(g).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if nodes[*a].requires_grad {
                    acc(*a, g.matmul(vb).expect("shape"));
                }
                if nodes[*b].requires_grad {
                    acc(*b, g.t_matmul(va).expect("shape"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Unary(a, kind) => {
                let x = &nodes[*a].value;
                let d = match *kind {
                    Unary::LeakyRelu(s) => x.zip_map(g, |v, gv| if v > 0.0 { gv } else { s * gv }),
                    Unary::Square => x.zip_map(g, |v, gv| 2.0 * v * gv),
                    Unary::Hinge => x.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }),
                    Unary::Log => x.zip_map(g, |v, gv| gv / v),
                    Unary::Exp => y.zip_map(g, |v, gv| v * gv),
                    Unary::Abs => x.zip_map(g, |v, gv| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                    Unary::Scale(c) => g.map(|gv| c * gv),
                    Unary::AddScalar(_) => g.clone(),
                    Unary::ClampMin(c) => x.zip_map(g, |v, gv| if v > c { gv } else { 0.0 }),
                };
                acc(*a, d);
            }
            Op::Binary(a, b, kind) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let full = y.shape();
                // Expand either side to the output shape, then fold back.
                let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                let n = y.len();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..n {
                    let (p, q, gv) = (at(va, i), at(vb, i), g.data()[i]);
                    let (x1, x2) = match kind {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * q, gv * p),
                        Binary::Min => {
                            if p <= q {
                                (gv, 0.0)
                            } else {
                                (0.0, gv)
                            }
                        }
                    };
                    da[i] = x1;
                    db[i] = x2;
                }
                let fold = |d: Vec<f64>, like: &Tensor| {
                    if like.shape() == full {
                        Tensor::new(full.0, full.1, d).expect("shape")
                    } else {
                        Tensor::scalar(d.iter().sum())
                    }
                };
                if nodes[*a].requires_grad {
                    acc(*a, fold(da, va));
                }
                if nodes[*b].requires_grad {
                    acc(*b, fold(db, vb));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if nodes[*r].requires_grad {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*r, dr);
                }
            }
            Op::MulCol(a, c) => {
                let (x, col) = (&nodes[*a].value, &nodes[*c].value);
                if nodes[*a].requires_grad {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = col.data()[i];
                        da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*a, da);
                }
                if nodes[*c].requires_grad {
                    let dc: Vec<f64> = (0..g.rows())
                        .map(|i| crate::tensor::dot(g.row(i), x.row(i)))
                        .collect();
                    acc(*c, Tensor::new(g.rows(), 1, dc).expect("shape"));
                }
            }
            Op::DivCol(a, c) => {
                let (x, col) = (&nodes[*a].value, &nodes[*c].value);
                if nodes[*a].requires_grad {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = col.data()[i];
                        da.row_mut(i).iter_mut().for_each(|v| *v /= s);
                    }
                    acc(*a, da);
                }
                if nodes[*c].requires_grad {
                    let dc: Vec<f64> = (0..g.rows())
                        .map(|i| {
                            let s = col.data()[i];
                            -crate::tensor::dot(g.row(i), x.row(i)) / (s * s)
                        })
                        .collect();
                    acc(*c, Tensor::new(g.rows(), 1, dc).expect("shape"));
                }
            }
            Op::Reduce(a, kind, axis) => {
                let x = &nodes[*a].value;
                let mut counts = vec![0usize; g.len()];
                if *kind != Reduce::Sum {
                    for i in 0..x.rows() {
                        for (j, &v) in x.row(i).iter().enumerate() {
                            if *kind == Reduce::Mean || v > 0.0 {
                                counts[axis.slot(i, j)] += 1;
                            }
                        }
                    }
                }
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let s = axis.slot(i, j);
                        let gv = g.data()[s];
                        let d = match kind {
                            Reduce::Sum => gv,
                            Reduce::Mean => gv / counts[s] as f64,
                            Reduce::MeanNonzero => {
                                if x.get(i, j) > 0.0 {
                                    gv / counts[s] as f64
                                } else {
                                    0.0
                                }
                            }
                        };
                        da.set(i, j, d);
                    }
                }
                acc(*a, da);
            }
            Op::RowNorm(a) => {
                let x = &nodes[*a].value;
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = y.data()[i];
                    if n == 0.0 {
                        continue;
                    }
                    let s = g.data()[i] / n;
                    for (o, v) in da.row_mut(i).iter_mut().zip(x.row(i)) {
                        *o = s * v;
                    }
                }
                acc(*a, da);
            }
            Op::Softmax(a) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = crate::tensor::dot(yr, gr);
                    for ((o, &yv), &gv) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*a, da);
            }
            Op::RowMax(a, arg) => {
                let x = &nodes[*a].value;
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (i, &j) in arg.iter().enumerate() {
                    da.set(i, j, g.data()[i]);
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    if nodes[p].requires_grad {
                        let d = Tensor::from_fn(g.rows(), c, |i, j| g.get(i, off + j));
                        acc(p, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = nodes[p].value.shape();
                    if nodes[p].requires_grad {
                        let d = Tensor::new(r, c, g.data()[off * c..(off + r) * c].to_vec())
                            .expect("shape");
                        acc(p, d);
                    }
                    off += r;
                }
            }
            Op::SelectRows(a, rows) => {
                let x = &nodes[*a].value;
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, da);
            }
            Op::Gather(a, entries) => {
                let x = &nodes[*a].value;
                let mut da = Tensor::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    let cur = da.get(r, c);
                    da.set(r, c, cur + g.data()[k]);
                }
                acc(*a, da);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 0.0], vec![0.0, 1.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 0.268_94).abs() < 1e-5);
        assert!((v.get(1, 1) - 0.731_06).abs() < 1e-5);

        let x = tape.constant(t(&[vec![5.0, f64::NEG_INFINITY, 5.0]]));
        let y = tape.softmax_rows(x, Some(&[false, true, false])).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0], vec![0.0, 0.0]]));
        let err = tape.softmax_rows(x, Some(&[false, false, true, true])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn masked_softmax_entries_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![0.3, -1.0, 2.0]]));
        let w = tape.constant(t(&[vec![1.0], vec![5.0], vec![-2.0]]));
        let y = tape.softmax_rows(x, Some(&[false, true, false])).unwrap();
        let z = tape.matmul(y, w).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).get(0, 1), 0.0);
        assert!(g.wrt(x).get(0, 0) != 0.0);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![-1.0]]));
        let y = tape.leaky_relu(x, 0.1);
        assert!((tape.value(y).item() + 0.1).abs() < 1e-15);

        let x = tape.leaf(t(&[vec![-0.3]]));
        let y = tape.hinge(x);
        assert_eq!(tape.value(y).item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.2));
        let h = tape.hinge(x);
        let y = tape.square(h);
        assert!((tape.value(y).item() - 0.04).abs() < 1e-15);
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(x).item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn hinge_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.hinge(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 0.0]]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0625, 0.0, 0.0]]));
        let m = tape.mean_nonzero(x);
        assert_eq!(tape.value(m).item(), 0.0625);
        let z = tape.constant(t(&[vec![0.0, 0.0]]));
        let m = tape.mean_nonzero(z);
        assert_eq!(tape.value(m).item(), 0.0);
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = tape.sum(a);
        assert_eq!(tape.value(s).item(), 10.0);
        let r = tape.reduce(a, Reduce::Sum, Axis::Rows);
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
        let c = tape.reduce(a, Reduce::Mean, Axis::Cols);
        assert_eq!(tape.value(c).data(), &[2.0, 3.0]);
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
        tape.reset();
        let w = tape.leaf(Tensor::zeros(2, 2));
        let l = tape.sum(w);
        assert!(tape.backward(l).is_ok());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(1, 2, 3.0));
        let w = tape.leaf(Tensor::filled(2, 1, 1.0));
        let y = tape.matmul(c, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(w).data(), &[3.0, 3.0]);
    }

    #[test]
    fn row_max_respects_exclusion() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![9.0, 0.2, 0.5], vec![0.1, 9.0, -0.5]]));
        let m = tape.row_max(x, Some(&[true, false, false, false, true, false])).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 0.1]);
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
