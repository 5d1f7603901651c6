use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Added inside the only square root the tape exposes.
pub const SQRT_EPS: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a recorded value. Cheap to copy; only meaningful on the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn id(&self) -> usize {
        self.idx
    }
}

/// A primitive whose vector-Jacobian product is supplied by the caller
/// instead of being traced.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn vjp(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Atan2(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    SqrtEps(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SumCols(usize),
    L2Norm(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Atan2(..) => "atan2",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Abs(..) => "abs",
            Op::SqrtEps(..) => "sqrt_eps",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::SliceRows(..) => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SumCols(..) => "sum_cols",
            Op::L2Norm(..) => "l2_norm",
            Op::Custom(_, c) => c.name(),
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Atan2(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::SqrtEps(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SumCols(a)
            | Op::L2Norm(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Custom(ins, _) => ins.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitives for reverse-mode differentiation.
///
/// Values are computed eagerly when a primitive is recorded. Nodes only
/// reference earlier nodes, so reverse creation order is a valid reverse
/// topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros substituted when it has none.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

fn broadcast_binary(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (rows, cols) = shape;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(a.data()[bidx(a, r, c)], b.data()[bidx(b, r, c)]));
        }
    }
    Tensor::new(rows, cols, out)
}

/// Sums `g` (shaped like the broadcast output) down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    let (rows, cols) = g.shape();
    for r in 0..rows {
        for c in 0..cols {
            let i = bidx(&out, r, c);
            out.data_mut()[i] += g.get(r, c);
        }
    }
    out
}

/// Elementwise `g * d(a, b)` over the broadcast shape of `g`.
fn broadcast_grad(g: &Tensor, a: &Tensor, b: &Tensor, d: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = g.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(g.get(r, c) * d(a.data()[bidx(a, r, c)], b.data()[bidx(b, r, c)]));
        }
    }
    Tensor::new(rows, cols, out)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::CrossTape {
                expected: self.id,
                found: v.tape,
            });
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(idx);
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.idx].requires_grad = true;
        v
    }

    /// A constant input: it receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Same value, no recorded ancestry.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let value = broadcast_binary(va, vb, shape, f);
        Ok(self.push(value, op(ia, ib)))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary("atan2", y, x, f64::atan2, Op::Atan2)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        Ok(self.push(value, op(ia)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos)
    }

    /// `|a|`, with zero subgradient at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    /// `sqrt(a + 1e-12)`.
    pub fn sqrt_eps(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| (x + SQRT_EPS).sqrt(), Op::SqrtEps)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let value = va.matmul(vb);
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.transpose();
        Ok(self.push(value, Op::Transpose(ia)))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let (rows, cols) = va.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = va.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        Ok(self.push(Tensor::new(rows, cols, out), Op::Softmax(ia)))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Shape {
                op: "concat",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let rows = self.nodes[first].value.rows();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.nodes[first].value.shape(),
                    rhs: s,
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                out.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        Ok(self.push(Tensor::new(rows, cols, out), Op::Concat(idx)))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.cols() || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                lhs: va.shape(),
                rhs: (start, len),
            });
        }
        let mut out = Vec::with_capacity(va.rows() * len);
        for r in 0..va.rows() {
            out.extend_from_slice(&va.row_slice(r)[start..start + len]);
        }
        let value = Tensor::new(va.rows(), len, out);
        Ok(self.push(value, Op::SliceCols(ia, start)))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.rows() || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: va.shape(),
                rhs: (start, len),
            });
        }
        let c = va.cols();
        let value = Tensor::new(len, c, va.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(value, Op::SliceRows(ia, start)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(value, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let value = Tensor::scalar(va.sum() / va.len() as f64);
        Ok(self.push(value, Op::Mean(ia)))
    }

    /// Mean over rows: `R×C → 1×C`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let (rows, cols) = va.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(va.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        Ok(self.push(Tensor::row(out), Op::MeanRows(ia)))
    }

    /// Sum over columns: `R×C → R×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let out = (0..va.rows()).map(|r| va.row_slice(r).iter().sum()).collect();
        Ok(self.push(Tensor::column(out), Op::SumCols(ia)))
    }

    /// Row-wise Euclidean norm: `R×C → R×1`. The subgradient at a zero
    /// row is zero.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let out = (0..va.rows())
            .map(|r| va.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Tensor::column(out), Op::L2Norm(ia)))
    }

    /// Records a primitive with a caller-supplied value and VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(value, Op::Custom(idx, op)))
    }

    /// Reverse pass from a scalar. Gradients accumulate additively over
    /// fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        if let Some(bad) = self.first_nonfinite.filter(|&b| b <= root) {
            return Err(Error::NonFinite {
                node: bad,
                op: self.nodes[bad].op.name(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            for (input, gi) in self.vjp(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let unary = |a: usize, d: &dyn Fn(f64, f64) -> f64| {
            let x = self.val(a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * d(x, y))
                .collect();
            vec![(a, Tensor::new(x.rows(), x.cols(), data))]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g.clone(), self.val(*a).shape())),
                (*b, reduce_to(g.clone(), self.val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), self.val(*a).shape())),
                (*b, reduce_to(g.map(|v| -v), self.val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                vec![
                    (*a, reduce_to(broadcast_grad(g, va, vb, |_, y| y), va.shape())),
                    (*b, reduce_to(broadcast_grad(g, va, vb, |x, _| x), vb.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                vec![
                    (*a, reduce_to(broadcast_grad(g, va, vb, |_, y| 1.0 / y), va.shape())),
                    (*b, reduce_to(broadcast_grad(g, va, vb, |x, y| -x / (y * y)), vb.shape())),
                ]
            }
            Op::Atan2(a, b) => {
                let (vy, vx) = (self.val(*a), self.val(*b));
                vec![
                    (*a, reduce_to(broadcast_grad(g, vy, vx, |y, x| x / (x * x + y * y)), vy.shape())),
                    (*b, reduce_to(broadcast_grad(g, vy, vx, |y, x| -y / (x * x + y * y)), vx.shape())),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[*a].requires_grad {
                    out.push((*a, g.matmul_nt(vb)));
                }
                if self.nodes[*b].requires_grad {
                    out.push((*b, va.matmul_tn(g)));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Tanh(a) => unary(*a, &|_, y| 1.0 - y * y),
            Op::Sigmoid(a) => unary(*a, &|_, y| y * (1.0 - y)),
            Op::Exp(a) => unary(*a, &|_, y| y),
            Op::Log(a) => unary(*a, &|x, _| 1.0 / x),
            Op::Sin(a) => unary(*a, &|x, _| x.cos()),
            Op::Cos(a) => unary(*a, &|x, _| -x.sin()),
            Op::Abs(a) => unary(*a, &|x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::SqrtEps(a) => unary(*a, &|_, y| 0.5 / y),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                unary(*a, &move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
            }
            Op::Softmax(a) => {
                let (rows, cols) = y.shape();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                vec![(*a, Tensor::new(rows, cols, out))]
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let c = self.val(p).cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                        }
                        offset += c;
                        (p, Tensor::new(rows, c, data))
                    })
                    .collect()
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.val(*a).shape();
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for (k, &v) in g.row_slice(r).iter().enumerate() {
                        out.set(r, start + k, v);
                    }
                }
                vec![(*a, out)]
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.val(*a).shape();
                let mut out = Tensor::zeros(rows, cols);
                out.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                vec![(*a, out)]
            }
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = self.val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.item() / (r * c) as f64))]
            }
            Op::MeanRows(a) => {
                let (r, c) = self.val(*a).shape();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend(g.data().iter().map(|v| v / r as f64));
                }
                vec![(*a, Tensor::new(r, c, out))]
            }
            Op::SumCols(a) => {
                let (r, c) = self.val(*a).shape();
                let mut out = Vec::with_capacity(r * c);
                for row in 0..r {
                    out.extend(std::iter::repeat_n(g.get(row, 0), c));
                }
                vec![(*a, Tensor::new(r, c, out))]
            }
            Op::L2Norm(a) => {
                let x = self.val(*a);
                let (r, c) = x.shape();
                let mut out = Vec::with_capacity(r * c);
                for row in 0..r {
                    let n = y.get(row, 0);
                    let gr = g.get(row, 0);
                    if n > 0.0 {
                        out.extend(x.row_slice(row).iter().map(|v| gr * v / n));
                    } else {
                        out.extend(std::iter::repeat_n(0.0, c));
                    }
                }
                vec![(*a, Tensor::new(r, c, out))]
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&k| self.val(k)).collect();
                inputs.iter().copied().zip(op.vjp(g, &vals, y)).collect()
            }
        }
    }
}
