//! Reverse-mode automatic differentiation over batched 2-D tensors.
//!
//! A [`Tape`] records primitive operations in execution order. Nodes hold
//! their forward value; parameter nodes borrow their value from the owning
//! [`ParamSet`] instead of copying it. [`Tape::backward`] sweeps the nodes
//! once in reverse and returns owned [`Gradients`], which are then routed to
//! parameter sets with [`ParamSet::accumulate`] after the tape is dropped.

use std::collections::HashMap;

use super::error::NumericsError;
use super::params::{ParamId, ParamSet};
use super::tensor::{axpy, dot, linear_forward, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
    Exp,
    Log,
    Square,
    Recip,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { slot: usize, index: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    MaxConst(Var, f64),
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Slice { a: Var, start: usize },
    SumAll(Var),
    RowSum(Var),
    LogSoftmax(Var),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    sets: Vec<&'p ParamSet>,
    param_cache: HashMap<(usize, usize), Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            sets: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param { slot, index } => self.sets[slot].value(ParamId(index)),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable input leaf (gradient readable through [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Detached copy of `v`: same value, gradient-stopping.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, set: &'p ParamSet, id: ParamId) -> Var {
        let slot = match self.sets.iter().position(|s| s.id() == set.id()) {
            Some(s) => s,
            None => {
                self.sets.push(set);
                self.sets.len() - 1
            }
        };
        if let Some(&v) = self.param_cache.get(&(slot, id.0)) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param {
                slot,
                index: id.0,
            },
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert((slot, id.0), v);
        v
    }

    /// `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Op::Linear { x, w, b }, out, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise op on shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scale each row of `a` (n×m) by the matching entry of `col` (n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!(tc.shape(), (ta.rows, 1), "mul_col expects an n×1 column");
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let k = tc.data[r];
            out.row_slice_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(Op::MulCol(a, col), out, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        let rg = self.rg(a);
        self.push(Op::Scale(a, k), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(Op::Offset(a), out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(Op::Unary(a, f), out, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Elementwise `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn max_const(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(Op::MaxConst(a, floor), out, rg)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hstack(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.to_vec()), out, rg)
    }

    /// Row-wise concatenation.
    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::VStack(parts.to_vec()), out, rg)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.rows, "row slice {start}+{len} beyond {} rows", ta.rows);
        let out = Tensor::from_vec(len, ta.cols, ta.data[start * ta.cols..(start + len) * ta.cols].to_vec());
        let rg = self.rg(a);
        self.push(Op::SliceRows { a, start }, out, rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice {start}+{len} beyond {} columns", ta.cols);
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.row_slice_mut(r)
                .copy_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Op::Slice { a, start }, out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::from_vec(1, 1, vec![s]), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: n×m → n×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows).map(|r| ta.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(ta.rows, 1, data);
        let rg = self.rg(a);
        self.push(Op::RowSum(a), out, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let row = out.row_slice_mut(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), out, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut param_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param { slot, index } => {
                    param_grads.push((self.sets[*slot].id(), *index, g.clone()));
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(tx.rows, tx.cols);
                        for r in 0..g.rows {
                            let gr = g.row_slice(r);
                            let dxr = dx.row_slice_mut(r);
                            for (o, &go) in gr.iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, tw.row_slice(o), dxr);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor::zeros(tw.rows, tw.cols);
                        for r in 0..g.rows {
                            let xr = tx.row_slice(r);
                            for (o, &go) in g.row_slice(r).iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, xr, dw.row_slice_mut(o));
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = Tensor::zeros(1, g.cols);
                            for r in 0..g.rows {
                                for (d, x) in db.data.iter_mut().zip(g.row_slice(r)) {
                                    *d += x;
                                }
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = zip_with(&g, tb, |g, y| g * y);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = zip_with(&g, ta, |g, x| g * x);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (self.value(*a), self.value(*col));
                    if self.rg(*a) {
                        let mut d = g.clone();
                        for r in 0..d.rows {
                            let k = tc.data[r];
                            d.row_slice_mut(r).iter_mut().for_each(|x| *x *= k);
                        }
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*col) {
                        let data = (0..g.rows)
                            .map(|r| dot(g.row_slice(r), ta.row_slice(r)))
                            .collect();
                        accumulate(&mut grads, *col, Tensor::from_vec(g.rows, 1, data));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, g.map(|x| k * x));
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Unary(a, f) => {
                    let (tx, ty) = (self.value(*a), node.value.as_ref().unwrap());
                    let mut d = g;
                    for ((dg, &x), &y) in d.data.iter_mut().zip(&tx.data).zip(&ty.data) {
                        *dg *= f.derivative(x, y);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MaxConst(a, floor) => {
                    let tx = self.value(*a);
                    let d = zip_with(&g, tx, |g, x| if x > *floor { g } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.rg(p) {
                            let mut d = Tensor::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                d.row_slice_mut(r)
                                    .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        offset += cols;
                    }
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.rg(p) {
                            let d = Tensor::from_vec(rows, cols, g.data[offset * cols..(offset + rows) * cols].to_vec());
                            accumulate(&mut grads, p, d);
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    d.data[start * cols..(start + g.rows) * cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, d);
                }
                Op::Slice { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_slice_mut(r)[*start..*start + g.cols].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.data[0]));
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let k = g.data[r];
                        d.row_slice_mut(r).iter_mut().for_each(|x| *x = k);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        let gs: f64 = g.row_slice(r).iter().sum();
                        let yr = y.row_slice(r);
                        for (dx, &yv) in d.row_slice_mut(r).iter_mut().zip(yr) {
                            *dx -= yv.exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(u64, usize, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf created by [`Tape::input`].
    /// Interior gradients are released during the sweep; `None` means the
    /// node is interior or did not contribute to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(tensor index, gradient)` pairs routed to the parameter set `set_id`.
    pub fn param_grads(&self, set_id: u64) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter(move |(id, _, _)| *id == set_id)
            .map(|(_, index, g)| (*index, g))
    }
}
