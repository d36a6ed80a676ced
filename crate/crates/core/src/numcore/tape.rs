//! Define-by-run reverse-mode differentiation over dense row-major matrices.
//!
//! Every tensor is two-dimensional (`[rows, cols]`); vectors are `[1, n]`
//! rows and scalars are `[1, 1]`. A [`Tape`] owns all values; a
//! [`DiffTensor`] is a cheap handle into it. Operations are evaluated
//! eagerly and recorded only when at least one input needs a gradient, so
//! passes built purely from constants cost no backward work.
//!
//! Broadcasting rules for the binary elementwise ops (`add`, `sub`, `mul`):
//! the right operand either has the same shape as the left one, is a row
//! `[1, cols]` repeated over every row of the left operand, or is a scalar
//! `[1, 1]`.

use super::{NumError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffTensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl DiffTensor {
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,k] x [n,k] -> [m,n]`, i.e. `a * b^T`
    MatMulNt,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// `x ln x` with `0 ln 0 = 0`
    XLogX,
    /// Sum of all elements to a `[1,1]` scalar.
    Sum,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax.
    LogSoftmax,
    /// Row-wise L2 normalisation.
    L2Normalize,
    /// Column-wise concatenation of inputs with equal row counts.
    Concat,
    /// Row-wise concatenation of inputs with equal column counts.
    ConcatRows,
    Slice {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    Transpose,
    /// Elementwise product with a constant mask of the input's shape.
    DropoutMask(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    XLogX(usize),
    Sum(usize),
    Softmax(usize),
    LogSoftmax(usize),
    L2Normalize(usize, Vec<f64>),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    Slice { src: usize, row: usize, col: usize },
    Transpose(usize),
    Mask(usize, Vec<f64>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Recording of one forward pass. Single use: a second [`Tape::backward`]
/// fails with [`NumError::TapeConsumed`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFiniteValue { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
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

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> DiffTensor {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { op, rows, cols, value, needs_grad });
        DiffTensor { id, rows, cols }
    }

    fn node(&self, t: DiffTensor) -> &Node {
        &self.nodes[t.id]
    }

    fn needs(&self, t: DiffTensor) -> bool {
        self.nodes[t.id].needs_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<DiffTensor> {
        self.input(rows, cols, values, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<DiffTensor> {
        self.input(rows, cols, values, false)
    }

    pub fn row(&mut self, values: &[f64]) -> Result<DiffTensor> {
        self.constant(1, values.len(), values.to_vec())
    }

    pub fn scalar(&mut self, value: f64) -> Result<DiffTensor> {
        self.constant(1, 1, vec![value])
    }

    fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>, grad: bool) -> Result<DiffTensor> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(NumError::ShapeMismatch {
                op: "leaf",
                lhs: [rows, cols],
                rhs: [values.len(), 1],
            });
        }
        check_finite("leaf", &values)?;
        Ok(self.push(Op::Leaf, rows, cols, values, grad))
    }

    pub fn value(&self, t: DiffTensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    /// Scalar value of a `[1,1]` tensor (first element otherwise).
    pub fn item(&self, t: DiffTensor) -> f64 {
        self.nodes[t.id].value[0]
    }

    pub fn requires_grad(&self, t: DiffTensor) -> bool {
        self.needs(t)
    }

    /// Gradient of the last backward pass; zeros for nodes the loss does
    /// not reach.
    pub fn grad(&self, t: DiffTensor) -> Vec<f64> {
        match self.grads.get(t.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        }
    }

    pub(crate) fn take_grad(&mut self, t: DiffTensor) -> Option<Vec<f64>> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }

    /// Same computation without gradient tracking.
    pub fn detach(&mut self, t: DiffTensor) -> DiffTensor {
        let n = self.node(t);
        let (rows, cols, value) = (n.rows, n.cols, n.value.clone());
        self.push(Op::Leaf, rows, cols, value, false)
    }

    fn bcast(&self, op: &'static str, a: DiffTensor, b: DiffTensor) -> Result<Bcast> {
        if a.shape() == b.shape() {
            Ok(Bcast::Same)
        } else if b.rows == 1 && b.cols == a.cols {
            Ok(Bcast::Row)
        } else if b.is_scalar() {
            Ok(Bcast::Scalar)
        } else {
            Err(NumError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: DiffTensor,
        b: DiffTensor,
        f: fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> Result<DiffTensor> {
        let mode = self.bcast(name, a, b)?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let cols = a.cols;
        let out: Vec<f64> = match mode {
            Bcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Row => av.iter().enumerate().map(|(i, x)| f(*x, bv[i % cols])).collect(),
            Bcast::Scalar => av.iter().map(|x| f(*x, bv[0])).collect(),
        };
        check_finite(name, &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(mk(a.id, b.id, mode), a.rows, a.cols, out, ng))
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: DiffTensor, k: f64) -> Result<DiffTensor> {
        let out: Vec<f64> = self.node(a).value.iter().map(|x| x * k).collect();
        check_finite("scale", &out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Scale(a.id, k), a.rows, a.cols, out, ng))
    }

    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        if a.cols != b.rows {
            return Err(NumError::ShapeMismatch { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        check_finite("matmul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a.id, b.id), m, n, out, ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        if a.cols != b.cols {
            return Err(NumError::ShapeMismatch { op: "matmul_nt", lhs: a.shape(), rhs: b.shape() });
        }
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        check_finite("matmul_nt", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNt(a.id, b.id), m, n, out, ng))
    }

    fn unary(&mut self, name: &'static str, a: DiffTensor, f: fn(f64) -> f64, op: Op) -> Result<DiffTensor> {
        let out: Vec<f64> = self.node(a).value.iter().map(|x| f(*x)).collect();
        check_finite(name, &out)?;
        let ng = self.needs(a);
        Ok(self.push(op, a.rows, a.cols, out, ng))
    }

    pub fn tanh(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn relu(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn exp(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("exp", a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("log", a, f64::ln, Op::Log(a.id))
    }

    pub fn xlogx(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        self.unary("xlogx", a, |x| if x == 0.0 { 0.0 } else { x * x.ln() }, Op::XLogX(a.id))
    }

    pub fn sum(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let s: f64 = self.node(a).value.iter().sum();
        check_finite("sum", &[s])?;
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a.id), 1, 1, vec![s], ng))
    }

    pub fn mean(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let s = self.sum(a)?;
        self.scale(s, 1.0 / a.len() as f64)
    }

    pub fn softmax(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let src = &self.node(a).value;
        let mut out = vec![0.0; src.len()];
        for r in 0..a.rows {
            let span = r * a.cols..(r + 1) * a.cols;
            softmax_row(&src[span.clone()], &mut out[span]);
        }
        check_finite("softmax", &out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a.id), a.rows, a.cols, out, ng))
    }

    pub fn log_softmax(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let src = &self.node(a).value;
        let mut out = vec![0.0; src.len()];
        for r in 0..a.rows {
            let row = &src[r * a.cols..(r + 1) * a.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out[r * a.cols..(r + 1) * a.cols].iter_mut().zip(row) {
                *o = (x - max) - log_z;
            }
        }
        check_finite("log_softmax", &out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::LogSoftmax(a.id), a.rows, a.cols, out, ng))
    }

    pub fn l2_normalize(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let src = &self.node(a).value;
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(a.rows);
        for r in 0..a.rows {
            let row = &src[r * a.cols..(r + 1) * a.cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(NumError::NonFiniteValue { op: "l2_normalize" });
            }
            norms.push(norm);
            for (o, x) in out[r * a.cols..(r + 1) * a.cols].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        check_finite("l2_normalize", &out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::L2Normalize(a.id, norms), a.rows, a.cols, out, ng))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        let first = *parts.first().ok_or(NumError::InvalidArgument("concat of nothing".into()))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(NumError::ShapeMismatch { op: "concat", lhs: first.shape(), rhs: bad.shape() });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let v = &self.node(*p).value;
                out.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), rows, cols, out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        let first = *parts.first().ok_or(NumError::InvalidArgument("concat of nothing".into()))?;
        let cols = first.cols;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(NumError::ShapeMismatch { op: "concat_rows", lhs: first.shape(), rhs: bad.shape() });
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.node(*p).value);
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rows, cols, out, ng))
    }

    pub fn slice(&mut self, a: DiffTensor, row: usize, col: usize, rows: usize, cols: usize) -> Result<DiffTensor> {
        if rows == 0 || cols == 0 || row + rows > a.rows || col + cols > a.cols {
            return Err(NumError::ShapeMismatch { op: "slice", lhs: a.shape(), rhs: [row + rows, col + cols] });
        }
        let src = &self.node(a).value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            out.extend_from_slice(&src[r * a.cols + col..r * a.cols + col + cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Slice { src: a.id, row, col }, rows, cols, out, ng))
    }

    /// Columns `[col, col+cols)` of a row vector or matrix.
    pub fn cols_of(&mut self, a: DiffTensor, col: usize, cols: usize) -> Result<DiffTensor> {
        self.slice(a, 0, col, a.rows, cols)
    }

    pub fn row_of(&mut self, a: DiffTensor, row: usize) -> Result<DiffTensor> {
        self.slice(a, row, 0, 1, a.cols)
    }

    pub fn transpose(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let src = &self.node(a).value;
        let mut out = vec![0.0; src.len()];
        for r in 0..a.rows {
            for c in 0..a.cols {
                out[c * a.rows + r] = src[r * a.cols + c];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Transpose(a.id), a.cols, a.rows, out, ng))
    }

    pub fn dropout_mask(&mut self, a: DiffTensor, mask: Vec<f64>) -> Result<DiffTensor> {
        if mask.len() != a.len() {
            return Err(NumError::ShapeMismatch { op: "dropout_mask", lhs: a.shape(), rhs: [mask.len(), 1] });
        }
        check_finite("dropout_mask", &mask)?;
        let out: Vec<f64> = self.node(a).value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.needs(a);
        Ok(self.push(Op::Mask(a.id, mask), a.rows, a.cols, out, ng))
    }

    /// Generic dispatch over [`Primitive`].
    pub fn apply(&mut self, prim: &Primitive, inputs: &[DiffTensor]) -> Result<DiffTensor> {
        let arity = match prim {
            Primitive::MatMul | Primitive::MatMulNt | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            Primitive::Concat | Primitive::ConcatRows => usize::MAX,
            _ => 1,
        };
        if arity != usize::MAX && inputs.len() != arity {
            return Err(NumError::InvalidArgument(format!(
                "{prim:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::MatMulNt => self.matmul_nt(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Scale(k) => self.scale(inputs[0], *k),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::XLogX => self.xlogx(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Softmax => self.softmax(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::L2Normalize => self.l2_normalize(inputs[0]),
            Primitive::Concat => self.concat(inputs),
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::Slice { row, col, rows, cols } => self.slice(inputs[0], *row, *col, *rows, *cols),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::DropoutMask(m) => self.dropout_mask(inputs[0], m.clone()),
        }
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&mut self, loss: DiffTensor) -> Result<()> {
        if self.consumed {
            return Err(NumError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(NumError::EmptyTape);
        }
        if !loss.is_scalar() {
            return Err(NumError::NonScalarLoss(loss.shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let y = &node.value;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].needs_grad {
                return;
            }
            let len = nodes[target].value.len();
            let buf = grads[target].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let cols = node.cols;
                acc(*b, &mut |d| match mode {
                    Bcast::Same => d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g),
                    Bcast::Row => g.iter().enumerate().for_each(|(i, g)| d[i % cols] += sign * g),
                    Bcast::Scalar => d[0] += sign * g.iter().sum::<f64>(),
                });
            }
            Op::Mul(a, b, mode) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let cols = node.cols;
                acc(*a, &mut |d| match mode {
                    Bcast::Same => d.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b),
                    Bcast::Row => d.iter_mut().zip(g).enumerate().for_each(|(i, (d, g))| *d += g * bv[i % cols]),
                    Bcast::Scalar => d.iter_mut().zip(g).for_each(|(d, g)| *d += g * bv[0]),
                });
                acc(*b, &mut |d| match mode {
                    Bcast::Same => d.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a),
                    Bcast::Row => g.iter().zip(av).enumerate().for_each(|(i, (g, a))| d[i % cols] += g * a),
                    Bcast::Scalar => d[0] += g.iter().zip(av).map(|(g, a)| g * a).sum::<f64>(),
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g)),
            Op::MatMul(a, b) => {
                let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].cols);
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                // da = g * b^T
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // db = a^T * g
                acc(*b, &mut |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (dd, gg) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dd += x * gg;
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].rows);
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                // da = g * b
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x == 0.0 {
                                continue;
                            }
                            for (dd, bb) in d[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *dd += x * bb;
                            }
                        }
                    }
                });
                // db = g^T * a
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x == 0.0 {
                                continue;
                            }
                            for (dd, aa) in d[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *dd += x * aa;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * (1.0 - y * y))
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y * (1.0 - y))
            }),
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    })
                })
            }
            Op::Exp(a) => acc(*a, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y)),
            Op::Log(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| *d += g / x))
            }
            Op::XLogX(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g * (x.ln() + 1.0)
                        }
                    })
                })
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Softmax(a) => {
                let cols = node.cols;
                acc(*a, &mut |d| {
                    for r in 0..node.rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                        for i in span {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let cols = node.cols;
                acc(*a, &mut |d| {
                    for r in 0..node.rows {
                        let span = r * cols..(r + 1) * cols;
                        let gs: f64 = g[span.clone()].iter().sum();
                        for i in span {
                            d[i] += g[i] - y[i].exp() * gs;
                        }
                    }
                })
            }
            Op::L2Normalize(a, norms) => {
                let cols = node.cols;
                acc(*a, &mut |d| {
                    for (r, norm) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                        for i in span {
                            d[i] += (g[i] - y[i] * dot) / norm;
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let cols = node.cols;
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[*p].cols;
                    acc(*p, &mut |d| {
                        for r in 0..node.rows {
                            for c in 0..pc {
                                d[r * pc + c] += g[r * cols + offset + c];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[*p].value.len();
                    acc(*p, &mut |d| d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g));
                    offset += len;
                }
            }
            Op::Slice { src, row, col } => {
                let scols = nodes[*src].cols;
                acc(*src, &mut |d| {
                    for r in 0..node.rows {
                        for c in 0..node.cols {
                            d[(row + r) * scols + col + c] += g[r * node.cols + c];
                        }
                    }
                })
            }
            Op::Transpose(a) => acc(*a, &mut |d| {
                for r in 0..node.rows {
                    for c in 0..node.cols {
                        d[c * node.rows + r] += g[r * node.cols + c];
                    }
                }
            }),
            Op::Mask(a, m) => acc(*a, &mut |d| d.iter_mut().zip(g).zip(m).for_each(|((d, g), m)| *d += g * m)),
        }
    }
}
