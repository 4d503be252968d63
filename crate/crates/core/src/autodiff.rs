//! Tape-based reverse-mode differentiation over dense row-major tensors.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gradient needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("variables belong to different tapes")]
    ForeignTape,
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Dense row-major matrix; vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::new(n, 1, v)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A B` for row-major matrices.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Square,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBroadcast(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Unary(usize, Unary),
    Scale(usize, f64),
    MulScalar(usize, usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Gather(usize, Arc<Vec<usize>>),
    Dot(usize, usize),
    SparseMatvec(Arc<CsrMatrix>, usize),
    TileRows(usize),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Depends on at least one differentiable leaf.
    live: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records operations for one backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let live = {
            let l = |i: usize| inner.nodes[i].live;
            match &op {
                Op::Leaf => true,
                Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::AddRowBroadcast(a, b)
                | Op::MatMul(a, b)
                | Op::MulScalar(a, b)
                | Op::ConcatRows(a, b)
                | Op::ConcatCols(a, b)
                | Op::Dot(a, b) => l(*a) || l(*b),
                Op::Sum(a)
                | Op::Mean(a)
                | Op::Unary(a, _)
                | Op::Scale(a, _)
                | Op::Gather(a, _)
                | Op::SparseMatvec(_, a)
                | Op::TileRows(a)
                | Op::Reshape(a) => l(*a),
            }
        };
        inner.nodes.push(Node { op, value, live });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A leaf that gradients may be requested for.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A leaf excluded from differentiation; its adjoint is reported as zero.
    pub fn constant(&self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.inner.borrow_mut().nodes[v.id].live = false;
        v
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.var(Tensor::scalar(v))
    }

    pub fn vector(&self, v: Vec<f64>) -> Var {
        self.var(Tensor::vector(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse sweep from scalar `loss`; returns adjoints of `wrt`, zero when unreachable.
    pub fn gradient(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        if !self.same(&loss.tape) || wrt.iter().any(|v| !self.same(&v.tape)) {
            return Err(AdError::ForeignTape);
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            backward(nodes, id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|v| {
                adj.get(v.id)
                    .filter(|_| nodes[v.id].live)
                    .and_then(Clone::clone)
                    .unwrap_or_else(|| {
                        let (r, c) = nodes[v.id].value.shape();
                        Tensor::zeros(r, c)
                    })
            })
            .collect())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward(nodes: &[Node], id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    if !nodes[id].live {
        return;
    }
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, g.clone());
            let mut n = g.clone();
            n.data.iter_mut().for_each(|x| *x = -*x);
            accumulate(adj, *b, n);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
            let gb = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, ga));
            accumulate(adj, *b, Tensor::new(vb.rows, vb.cols, gb));
        }
        Op::AddRowBroadcast(a, b) => {
            accumulate(adj, *a, g.clone());
            let mut gb = vec![0.0; g.cols];
            for row in g.data.chunks(g.cols) {
                for (s, x) in gb.iter_mut().zip(row) {
                    *s += x;
                }
            }
            accumulate(adj, *b, Tensor::new(1, g.cols, gb));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows, va.cols, vb.cols);
            // dA = G Bᵀ
            let mut ga = vec![0.0; m * k];
            for i in (0..m).filter(|_| nodes[*a].live) {
                let grow = &g.data[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &vb.data[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            // dB = Aᵀ G
            let mut gb = vec![0.0; k * n];
            for i in (0..m).filter(|_| nodes[*b].live) {
                let grow = &g.data[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = va.data[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (s, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *s += aip * x;
                    }
                }
            }
            accumulate(adj, *a, Tensor::new(m, k, ga));
            accumulate(adj, *b, Tensor::new(k, n, gb));
        }
        Op::Sum(a) => {
            let va = val(*a);
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, vec![g.data[0]; va.len()]));
        }
        Op::Mean(a) => {
            let va = val(*a);
            let s = g.data[0] / va.len() as f64;
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, vec![s; va.len()]));
        }
        Op::Unary(a, u) => {
            let va = val(*a);
            let d: Vec<f64> = g
                .data
                .iter()
                .zip(&va.data)
                .zip(&out.data)
                .map(|((gi, &x), &y)| {
                    gi * match u {
                        Unary::Square => 2.0 * x,
                        Unary::Exp => y,
                        Unary::Log => 1.0 / x,
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Relu => f64::from(u8::from(x > 0.0)),
                    }
                })
                .collect();
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, d));
        }
        Op::Scale(a, c) => {
            let d = g.data.iter().map(|x| c * x).collect();
            accumulate(adj, *a, Tensor::new(g.rows, g.cols, d));
        }
        Op::MulScalar(a, s) => {
            let (va, vs) = (val(*a), val(*s).data[0]);
            let d = g.data.iter().map(|x| vs * x).collect();
            accumulate(adj, *a, Tensor::new(g.rows, g.cols, d));
            let ds = g.data.iter().zip(&va.data).map(|(x, y)| x * y).sum();
            accumulate(adj, *s, Tensor::scalar(ds));
        }
        Op::ConcatRows(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let split = va.len();
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, g.data[..split].to_vec()));
            accumulate(adj, *b, Tensor::new(vb.rows, vb.cols, g.data[split..].to_vec()));
        }
        Op::ConcatCols(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (na, nb) = (va.cols, vb.cols);
            let mut ga = Vec::with_capacity(va.len());
            let mut gb = Vec::with_capacity(vb.len());
            for row in g.data.chunks(na + nb) {
                ga.extend_from_slice(&row[..na]);
                gb.extend_from_slice(&row[na..]);
            }
            accumulate(adj, *a, Tensor::new(va.rows, na, ga));
            accumulate(adj, *b, Tensor::new(vb.rows, nb, gb));
        }
        Op::Gather(a, idx) => {
            let va = val(*a);
            let mut d = vec![0.0; va.len()];
            for (gi, &k) in g.data.iter().zip(idx.iter()) {
                d[k] += gi;
            }
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, d));
        }
        Op::Dot(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let s = g.data[0];
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, vb.data.iter().map(|x| s * x).collect()));
            accumulate(adj, *b, Tensor::new(vb.rows, vb.cols, va.data.iter().map(|x| s * x).collect()));
        }
        Op::SparseMatvec(m, x) => {
            let d = m.spmv_transpose(&g.data).expect("shape checked when recorded");
            accumulate(adj, *x, Tensor::vector(d));
        }
        Op::TileRows(a) => {
            let va = val(*a);
            let mut d = vec![0.0; va.cols];
            for row in g.data.chunks(va.cols) {
                for (s, x) in d.iter_mut().zip(row) {
                    *s += x;
                }
            }
            accumulate(adj, *a, Tensor::new(1, va.cols, d));
        }
        Op::Reshape(a) => {
            let va = val(*a);
            accumulate(adj, *a, Tensor::new(va.rows, va.cols, g.data.clone()));
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// The single entry of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.data[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn check_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignTape)
        }
    }

    fn binary(&self, other: &Var, op: &'static str, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l != r {
            return Err(AdError::Shape { op, left: l, right: r });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.tape.push(mk(self.id, other.id), Tensor::new(l.0, l.1, data)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row_broadcast(&self, row: &Var) -> Result<Var> {
        self.check_tape(row)?;
        let (l, r) = (self.shape(), row.shape());
        if r != (1, l.1) {
            return Err(AdError::Shape {
                op: "add_row_broadcast",
                left: l,
                right: r,
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[row.id].value);
            let mut d = a.data.clone();
            for chunk in d.chunks_mut(l.1) {
                for (x, y) in chunk.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            d
        };
        Ok(self.tape.push(Op::AddRowBroadcast(self.id, row.id), Tensor::new(l.0, l.1, data)))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l.1 != r.0 {
            return Err(AdError::Shape { op: "matmul", left: l, right: r });
        }
        let mut c = vec![0.0; l.0 * r.1];
        {
            let inner = self.tape.inner.borrow();
            matmul_into(
                &inner.nodes[self.id].value.data,
                &inner.nodes[other.id].value.data,
                &mut c,
                l.0,
                l.1,
                r.1,
            );
        }
        Ok(self.tape.push(Op::MatMul(self.id, other.id), Tensor::new(l.0, r.1, c)))
    }

    /// Matrix times column vector.
    pub fn matvec(&self, x: &Var) -> Result<Var> {
        let r = x.shape();
        if r.1 != 1 {
            return Err(AdError::Shape {
                op: "matvec",
                left: self.shape(),
                right: r,
            });
        }
        self.matmul(x)
    }

    pub fn sum(&self) -> Var {
        let s = self.with(|t| t.data.iter().sum());
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var {
        let s = self.with(|t| t.data.iter().sum::<f64>() / t.len() as f64);
        self.tape.push(Op::Mean(self.id), Tensor::scalar(s))
    }

    fn unary(&self, u: Unary) -> Var {
        let t = self.with(|t| {
            let f: fn(f64) -> f64 = match u {
                Unary::Square => |x| x * x,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Tanh => f64::tanh,
                Unary::Sigmoid => |x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                },
                Unary::Relu => |x| x.max(0.0),
            };
            Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect())
        });
        self.tape.push(Op::Unary(self.id, u), t)
    }

    pub fn square(&self) -> Var {
        self.unary(Unary::Square)
    }

    pub fn exp(&self) -> Var {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Var {
        self.unary(Unary::Log)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(&self) -> Var {
        self.unary(Unary::Relu)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Var {
        let t = self.with(|t| Tensor::new(t.rows, t.cols, t.data.iter().map(|x| c * x).collect()));
        self.tape.push(Op::Scale(self.id, c), t)
    }

    /// Multiplication by a recorded `1 x 1` value.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        self.check_tape(s)?;
        if s.shape() != (1, 1) {
            return Err(AdError::Shape {
                op: "mul_scalar",
                left: self.shape(),
                right: s.shape(),
            });
        }
        let c = s.item();
        let t = self.with(|t| Tensor::new(t.rows, t.cols, t.data.iter().map(|x| c * x).collect()));
        Ok(self.tape.push(Op::MulScalar(self.id, s.id), t))
    }

    /// Stacks two tensors with equal column counts vertically.
    pub fn concat(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l.1 != r.1 {
            return Err(AdError::Shape { op: "concat", left: l, right: r });
        }
        let mut data = self.with(|t| t.data.clone());
        other.with(|t| data.extend_from_slice(&t.data));
        Ok(self.tape.push(Op::ConcatRows(self.id, other.id), Tensor::new(l.0 + r.0, l.1, data)))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l.0 != r.0 {
            return Err(AdError::Shape {
                op: "concat_cols",
                left: l,
                right: r,
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            let mut d = Vec::with_capacity(a.len() + b.len());
            for i in 0..l.0 {
                d.extend_from_slice(&a.data[i * l.1..(i + 1) * l.1]);
                d.extend_from_slice(&b.data[i * r.1..(i + 1) * r.1]);
            }
            d
        };
        Ok(self
            .tape
            .push(Op::ConcatCols(self.id, other.id), Tensor::new(l.0, l.1 + r.1, data)))
    }

    /// Entries `start..start+len` of the flattened tensor, as a column vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        self.gather(Arc::new((start..start + len).collect()))
    }

    /// Flattened entries at `idx`, as a column vector.
    pub fn gather(&self, idx: Arc<Vec<usize>>) -> Result<Var> {
        let n = self.with(Tensor::len);
        if let Some(&bad) = idx.iter().find(|&&k| k >= n) {
            return Err(AdError::Index {
                op: "gather",
                index: bad,
                len: n,
            });
        }
        let data = self.with(|t| idx.iter().map(|&k| t.data[k]).collect());
        Ok(self.tape.push(Op::Gather(self.id, idx), Tensor::vector(data)))
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l.0 * l.1 != r.0 * r.1 {
            return Err(AdError::Shape { op: "dot", left: l, right: r });
        }
        let s = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
        };
        Ok(self.tape.push(Op::Dot(self.id, other.id), Tensor::scalar(s)))
    }

    /// Constant sparse matrix times this vector.
    pub fn sparse_matvec(&self, m: Arc<CsrMatrix>) -> Result<Var> {
        let l = self.shape();
        if l.1 != 1 || l.0 != m.n_cols() {
            return Err(AdError::Shape {
                op: "sparse_matvec",
                left: (m.n_rows(), m.n_cols()),
                right: l,
            });
        }
        let y = self.with(|t| m.spmv(&t.data)).expect("shape checked");
        Ok(self.tape.push(Op::SparseMatvec(m, self.id), Tensor::vector(y)))
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn tile_rows(&self, m: usize) -> Result<Var> {
        let l = self.shape();
        if l.0 != 1 {
            return Err(AdError::Shape {
                op: "tile_rows",
                left: l,
                right: (m, l.1),
            });
        }
        let data = self.with(|t| t.data.repeat(m));
        Ok(self.tape.push(Op::TileRows(self.id), Tensor::new(m, l.1, data)))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var> {
        let l = self.shape();
        if l.0 * l.1 != rows * cols {
            return Err(AdError::Shape {
                op: "reshape",
                left: l,
                right: (rows, cols),
            });
        }
        let data = self.with(|t| t.data.clone());
        Ok(self.tape.push(Op::Reshape(self.id), Tensor::new(rows, cols, data)))
    }

    /// `½ ‖self‖²`.
    pub fn half_squared_norm(&self) -> Var {
        self.square().sum().scale(0.5)
    }
}

/// `rᵀ W r` for a constant weight matrix `W`.
pub fn quadratic_penalty(r: &Var, w: Arc<CsrMatrix>) -> Result<Var> {
    let wr = r.sparse_matvec(w)?;
    r.dot(&wr)
}
