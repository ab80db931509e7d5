//! Reverse-mode differentiation over a recorded sequence of matrix operations.
//!
//! A [`Graph`] is the computation record: every builder method evaluates its
//! operation immediately, appends a node holding the result, and returns a
//! [`Var`] handle. Nodes are appended in evaluation order, so the record is
//! topologically sorted by construction and [`Graph::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamping bound applied to probabilities inside [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Variance floor used by [`Graph::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, S, S),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    StackFrames(Var, usize),
    DepthwiseConv(Var, Var),
    GruSeq(Var, Var, Var),
    Bce(Var, Vec<S>),
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulRow(a, b) | DepthwiseConv(a, b) => vec![*a, *b],
            Affine(a, ..) | Sigmoid(a) | Tanh(a) | Silu(a) | SoftmaxRows(a) | LayerNormRows(a)
            | SliceRows(a, ..) | SliceCols(a, ..) | Gather(a, _) | StackFrames(a, _) | Bce(a, _)
            | Sum(a) | Mean(a) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            GruSeq(x, w, b) => vec![*x, *w, *b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zero when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Binary cross-entropy of probability `p` against a 0/1 label, with `p`
/// clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce<S: Scalar>(p: S, label: S) -> Result<S> {
    if label != S::zero() && label != S::one() {
        return Err(Error::Label(label.as_f64()));
    }
    Ok(bce_unchecked(p, label))
}

fn bce_unchecked<S: Scalar>(p: S, label: S) -> S {
    let eps = S::of(BCE_EPS);
    let pc = p.max(eps).min(S::one() - eps);
    -(label * pc.ln() + (S::one() - label) * (S::one() - pc).ln())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    if m.numel() == 0 {
        return Err(Error::EmptyInput);
    }
    let cols = m.cols();
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

// c[m×n] += a[m×k] · b[k×n]
fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_bt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_at_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

struct GruGates<S> {
    r: Vec<S>,
    z: Vec<S>,
    c: Vec<S>,
    /// Recurrent part of the candidate pre-activation, before the reset gate.
    hn: Vec<S>,
}

fn gru_gates<S: Scalar>(x: &[S], h: &[S], w: &[S], b: &[S]) -> GruGates<S> {
    let n = h.len();
    let mut hh = b.to_vec();
    mm_acc(h, w, &mut hh, 1, n, 3 * n);
    let r: Vec<S> = (0..n).map(|j| sigmoid(x[j] + hh[j])).collect();
    let z: Vec<S> = (0..n).map(|j| sigmoid(x[n + j] + hh[n + j])).collect();
    let hn = hh[2 * n..].to_vec();
    let c = (0..n).map(|j| (x[2 * n + j] + r[j] * hn[j]).tanh()).collect();
    GruGates { r, z, c, hn }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn mat<S: Scalar>(rows: usize, cols: usize, data: Vec<S>) -> Tensor<S> {
    Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
}

fn stack_frames<S: Scalar>(x: &Tensor<S>, s: usize) -> Tensor<S> {
    let (t, f) = (x.rows(), x.cols());
    let out_rows = t.div_ceil(s);
    let mut out = vec![S::zero(); out_rows * s * f];
    for r in 0..out_rows {
        for j in 0..s {
            let src = r * s + j;
            if src < t {
                out[(r * s + j) * f..(r * s + j + 1) * f].copy_from_slice(x.row(src));
            }
        }
    }
    mat(out_rows, s * f, out)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding a trainable or differentiated-through value.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<S>) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Replaces the value of a leaf. Call [`Graph::replay`] afterwards to
    /// propagate the change.
    pub fn set_leaf(&mut self, v: Var, t: Tensor<S>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Invalid("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "leaf shape {:?} vs {:?}",
                node.value.shape(),
                t.shape()
            )));
        }
        node.value = t;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in record order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Result<Var> {
        self.push(Op::Affine(a, scale, shift))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNormRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, len))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather(table, ids.to_vec()))
    }

    /// Folds each run of `stride` consecutive rows into one row, zero-padding
    /// the tail: `T × F -> ceil(T / stride) × (stride · F)`.
    pub fn stack_frames(&mut self, a: Var, stride: usize) -> Result<Var> {
        self.push(Op::StackFrames(a, stride))
    }

    /// Same-padded depthwise convolution along rows; `kernel` is `K × C`, K odd.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.push(Op::DepthwiseConv(x, kernel))
    }

    /// GRU recurrence over the rows of `x_proj` (`T × 3n`, input already
    /// projected, gate order r, z, n) from a zero state, with recurrent
    /// weight `w` (`n × 3n`) and bias `b` (`1 × 3n`). Returns all `T`
    /// hidden states as a `T × n` matrix.
    pub fn gru_seq(&mut self, x_proj: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::GruSeq(x_proj, w, b))
    }

    /// Elementwise binary cross-entropy against fixed labels.
    pub fn bce(&mut self, p: Var, labels: &[S]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l != S::zero() && l != S::one()) {
            return Err(Error::Label(bad.as_f64()));
        }
        self.push(Op::Bce(p, labels.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    fn eval(&self, op: &Op<S>) -> Result<Tensor<S>> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.cols() != b.rows() {
                    return Err(Error::Shape(format!(
                        "matmul {}x{} by {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut c = vec![S::zero(); m * n];
                mm_acc(a.data(), b.data(), &mut c, m, k, n);
                mat(m, n, c)
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.cols() != b.cols() {
                    return Err(Error::Shape(format!(
                        "matmul_t {}x{} by ({}x{})T",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                let mut c = vec![S::zero(); m * n];
                mm_bt_acc(a.data(), b.data(), &mut c, m, k, n);
                mat(m, n, c)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (v(a), v(b));
                same_shape(x, y, "elementwise")?;
                let f: fn(S, S) -> S = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                mat(x.rows(), x.cols(), data)
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (x, row) = (v(a), v(r));
                if row.numel() != x.cols() {
                    return Err(Error::Shape(format!(
                        "row broadcast: {} columns vs row of {}",
                        x.cols(),
                        row.numel()
                    )));
                }
                let is_add = matches!(op, Op::AddRow(..));
                let mut data = x.data().to_vec();
                for chunk in data.chunks_mut(x.cols()) {
                    for (d, &rv) in chunk.iter_mut().zip(row.data()) {
                        *d = if is_add { *d + rv } else { *d * rv };
                    }
                }
                mat(x.rows(), x.cols(), data)
            }
            Op::Affine(a, s, b) => {
                let x = v(a);
                mat(x.rows(), x.cols(), x.data().iter().map(|&p| *s * p + *b).collect())
            }
            Op::Sigmoid(a) => {
                let x = v(a);
                mat(x.rows(), x.cols(), x.data().iter().map(|&p| sigmoid(p)).collect())
            }
            Op::Tanh(a) => {
                let x = v(a);
                mat(x.rows(), x.cols(), x.data().iter().map(|&p| p.tanh()).collect())
            }
            Op::Silu(a) => {
                let x = v(a);
                mat(x.rows(), x.cols(), x.data().iter().map(|&p| p * sigmoid(p)).collect())
            }
            Op::SoftmaxRows(a) => {
                let x = v(a);
                let s = softmax_rows(x)?;
                mat(x.rows(), x.cols(), s.into_data())
            }
            Op::LayerNormRows(a) => {
                let x = v(a);
                let c = x.cols();
                let n = S::of_usize(c);
                let eps = S::of(LAYER_NORM_EPS);
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(c) {
                    let mean = row.iter().copied().sum::<S>() / n;
                    let var = row.iter().map(|&p| (p - mean) * (p - mean)).sum::<S>() / n;
                    let inv = S::one() / (var + eps).sqrt();
                    for p in row.iter_mut() {
                        *p = (*p - mean) * inv;
                    }
                }
                mat(x.rows(), c, data)
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let cols = v(&parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = v(p);
                    if t.cols() != cols {
                        return Err(Error::Shape(format!(
                            "concat_rows: {} columns vs {}",
                            t.cols(),
                            cols
                        )));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                mat(rows, cols, data)
            }
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let rows = v(&parts[0]).rows();
                if let Some(p) = parts.iter().find(|p| v(p).rows() != rows) {
                    return Err(Error::Shape(format!(
                        "concat_cols: {} rows vs {}",
                        v(p).rows(),
                        rows
                    )));
                }
                let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row(r));
                    }
                }
                mat(rows, cols, data)
            }
            Op::SliceRows(a, start, len) => {
                let x = v(a);
                if *len == 0 || start + len > x.rows() {
                    return Err(Error::Shape(format!(
                        "slice_rows {start}..{} of {} rows",
                        start + len,
                        x.rows()
                    )));
                }
                let c = x.cols();
                mat(*len, c, x.data()[start * c..(start + len) * c].to_vec())
            }
            Op::SliceCols(a, start, len) => {
                let x = v(a);
                if *len == 0 || start + len > x.cols() {
                    return Err(Error::Shape(format!(
                        "slice_cols {start}..{} of {} cols",
                        start + len,
                        x.cols()
                    )));
                }
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                mat(x.rows(), *len, data)
            }
            Op::Gather(t, ids) => {
                let table = v(t);
                if ids.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let mut data = Vec::with_capacity(ids.len() * table.cols());
                for &id in ids {
                    if id >= table.rows() {
                        return Err(Error::IdOutOfRange { id, size: table.rows() });
                    }
                    data.extend_from_slice(table.row(id));
                }
                mat(ids.len(), table.cols(), data)
            }
            Op::StackFrames(a, s) => {
                if *s == 0 {
                    return Err(Error::Invalid("stride must be positive".into()));
                }
                stack_frames(v(a), *s)
            }
            Op::DepthwiseConv(a, w) => {
                let (x, w) = (v(a), v(w));
                let (t, c, k) = (x.rows(), x.cols(), w.rows());
                if w.cols() != c || k % 2 == 0 {
                    return Err(Error::Shape(format!(
                        "depthwise kernel {}x{} for {c} channels (kernel length must be odd)",
                        w.rows(),
                        w.cols()
                    )));
                }
                let pad = k / 2;
                let mut out = vec![S::zero(); t * c];
                for ti in 0..t {
                    for ki in 0..k {
                        let src = ti + ki;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let xr = x.row(src - pad);
                        let wr = w.row(ki);
                        let orow = &mut out[ti * c..(ti + 1) * c];
                        for ((o, &xv), &wv) in orow.iter_mut().zip(xr).zip(wr) {
                            *o = *o + xv * wv;
                        }
                    }
                }
                mat(t, c, out)
            }
            Op::GruSeq(x, w, b) => {
                let (x, w, b) = (v(x), v(w), v(b));
                let n = w.rows();
                if w.cols() != 3 * n || x.cols() != 3 * n || b.shape() != [1, 3 * n] {
                    return Err(Error::Shape(format!(
                        "gru input {:?}, recurrent weight {:?}, bias {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    )));
                }
                let mut out = vec![S::zero(); x.rows() * n];
                let mut h = vec![S::zero(); n];
                for t in 0..x.rows() {
                    let gates = gru_gates(x.row(t), &h, w.data(), b.data());
                    for j in 0..n {
                        h[j] = (S::one() - gates.z[j]) * gates.c[j] + gates.z[j] * h[j];
                    }
                    out[t * n..(t + 1) * n].copy_from_slice(&h);
                }
                mat(x.rows(), n, out)
            }
            Op::Bce(p, labels) => {
                let x = v(p);
                if labels.len() != x.numel() {
                    return Err(Error::Shape(format!(
                        "bce: {} probabilities vs {} labels",
                        x.numel(),
                        labels.len()
                    )));
                }
                let data = x.data().iter().zip(labels).map(|(&q, &l)| bce_unchecked(q, l)).collect();
                mat(x.rows(), x.cols(), data)
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().copied().sum()),
            Op::Mean(a) => {
                let x = v(a);
                Tensor::scalar(x.data().iter().copied().sum::<S>() / S::of_usize(x.numel()))
            }
        })
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![S::one()]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |x: &Var| &self.nodes[x.0].value;
        let wants = |x: &Var| self.nodes[x.0].requires_grad;
        let y = &node.value;

        fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes_len: usize, x: Var) -> &'a mut Vec<S> {
            grads[x.0].get_or_insert_with(|| vec![S::zero(); nodes_len])
        }
        macro_rules! acc {
            ($x:expr) => {{
                let n = val(&$x).numel();
                slot(grads, n, $x)
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(a) {
                    mm_bt_acc(g, bv.data(), acc!(*a), m, n, k);
                }
                if wants(b) {
                    mm_at_acc(av.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if wants(a) {
                    mm_acc(g, bv.data(), acc!(*a), m, n, k);
                }
                if wants(b) {
                    mm_at_acc(g, av.data(), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(x) {
                        for (d, &gv) in acc!(*x).iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    for (d, &gv) in acc!(*a).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if wants(b) {
                    for (d, &gv) in acc!(*b).iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    for ((d, &gv), &o) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * o;
                    }
                }
                if wants(b) {
                    let av = val(a).data();
                    for ((d, &gv), &o) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d = *d + gv * o;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if wants(a) {
                    for (d, &gv) in acc!(*a).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if wants(r) {
                    let c = val(a).cols();
                    let dr = acc!(*r);
                    for chunk in g.chunks(c) {
                        for (d, &gv) in dr.iter_mut().zip(chunk) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let c = val(a).cols();
                if wants(a) {
                    let rv = val(r).data();
                    let da = acc!(*a);
                    for (dchunk, gchunk) in da.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, &gv), &w) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d = *d + gv * w;
                        }
                    }
                }
                if wants(r) {
                    let av = val(a).data();
                    let dr = acc!(*r);
                    for (achunk, gchunk) in av.chunks(c).zip(g.chunks(c)) {
                        for ((d, &gv), &x) in dr.iter_mut().zip(gchunk).zip(achunk) {
                            *d = *d + gv * x;
                        }
                    }
                }
            }
            Op::Affine(a, s, _) => {
                if wants(a) {
                    for (d, &gv) in acc!(*a).iter_mut().zip(g) {
                        *d = *d + gv * *s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    for ((d, &gv), &o) in acc!(*a).iter_mut().zip(g).zip(y.data()) {
                        *d = *d + gv * o * (S::one() - o);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    for ((d, &gv), &o) in acc!(*a).iter_mut().zip(g).zip(y.data()) {
                        *d = *d + gv * (S::one() - o * o);
                    }
                }
            }
            Op::Silu(a) => {
                if wants(a) {
                    let xv = val(a).data();
                    for ((d, &gv), &x) in acc!(*a).iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(x);
                        *d = *d + gv * s * (S::one() + x * (S::one() - s));
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(a) {
                    let c = y.cols();
                    let da = acc!(*a);
                    for ((dchunk, gchunk), ychunk) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                    {
                        let dot: S = gchunk.iter().zip(ychunk).map(|(&p, &q)| p * q).sum();
                        for ((d, &gv), &yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows(a) => {
                if wants(a) {
                    let xv = val(a);
                    let c = xv.cols();
                    let n = S::of_usize(c);
                    let eps = S::of(LAYER_NORM_EPS);
                    let da = acc!(*a);
                    for (r, (dchunk, gchunk)) in da.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xr = xv.row(r);
                        let mean = xr.iter().copied().sum::<S>() / n;
                        let var = xr.iter().map(|&p| (p - mean) * (p - mean)).sum::<S>() / n;
                        let inv = S::one() / (var + eps).sqrt();
                        let yr = y.row(r);
                        let gmean = gchunk.iter().copied().sum::<S>() / n;
                        let gy = gchunk.iter().zip(yr).map(|(&p, &q)| p * q).sum::<S>() / n;
                        for ((d, &gv), &yv) in dchunk.iter_mut().zip(gchunk).zip(yr) {
                            *d = *d + inv * (gv - gmean - yv * gy);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        for (d, &gv) in acc!(*p).iter_mut().zip(&g[offset..offset + n]) {
                            *d = *d + gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let dp = acc!(*p);
                        for (r, dchunk) in dp.chunks_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (d, &gv) in dchunk.iter_mut().zip(src) {
                                *d = *d + gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start, len) => {
                if wants(a) {
                    let c = val(a).cols();
                    let da = acc!(*a);
                    for (d, &gv) in da[start * c..(start + len) * c].iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                if wants(a) {
                    let c = val(a).cols();
                    let da = acc!(*a);
                    for (r, gchunk) in g.chunks(*len).enumerate() {
                        for (d, &gv) in da[r * c + start..r * c + start + len].iter_mut().zip(gchunk) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Gather(t, ids) => {
                if wants(t) {
                    let c = val(t).cols();
                    let dt = acc!(*t);
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, &gv) in dt[id * c..(id + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::StackFrames(a, s) => {
                if wants(a) {
                    let xv = val(a);
                    let (t, f) = (xv.rows(), xv.cols());
                    let da = acc!(*a);
                    for src in 0..t {
                        let (r, j) = (src / s, src % s);
                        let off = r * s * f + j * f;
                        for (d, &gv) in da[src * f..(src + 1) * f].iter_mut().zip(&g[off..off + f]) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::GruSeq(x, w, b) => {
                let (xv, wv, bv) = (val(x), val(w), val(b));
                let (steps, n) = (xv.rows(), wv.rows());
                let mut dx = vec![S::zero(); steps * 3 * n];
                let mut dw = vec![S::zero(); n * 3 * n];
                let mut db = vec![S::zero(); 3 * n];
                let mut carry = vec![S::zero(); n];
                let zeros = vec![S::zero(); n];
                for t in (0..steps).rev() {
                    let h_prev = if t == 0 { &zeros[..] } else { y.row(t - 1) };
                    let gates = gru_gates(xv.row(t), h_prev, wv.data(), bv.data());
                    let mut dhh = vec![S::zero(); 3 * n];
                    let dxt = &mut dx[t * 3 * n..(t + 1) * 3 * n];
                    for j in 0..n {
                        let dh = g[t * n + j] + carry[j];
                        let (r, z, c) = (gates.r[j], gates.z[j], gates.c[j]);
                        let dc = dh * (S::one() - z) * (S::one() - c * c);
                        let dz = dh * (h_prev[j] - c) * z * (S::one() - z);
                        let dr = dc * gates.hn[j] * r * (S::one() - r);
                        dxt[j] = dr;
                        dxt[n + j] = dz;
                        dxt[2 * n + j] = dc;
                        dhh[j] = dr;
                        dhh[n + j] = dz;
                        dhh[2 * n + j] = dc * r;
                        carry[j] = dh * z;
                    }
                    mm_at_acc(h_prev, &dhh, &mut dw, 1, n, 3 * n);
                    for (d, &v) in db.iter_mut().zip(&dhh) {
                        *d = *d + v;
                    }
                    mm_bt_acc(&dhh, wv.data(), &mut carry, 1, 3 * n, n);
                }
                for (var, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if wants(&var) {
                        for (a, v) in acc!(var).iter_mut().zip(d) {
                            *a = *a + v;
                        }
                    }
                }
            }
            Op::DepthwiseConv(a, w) => {
                let (xv, wv) = (val(a), val(w));
                let (t, c, k) = (xv.rows(), xv.cols(), wv.rows());
                let pad = k / 2;
                if wants(a) {
                    let da = acc!(*a);
                    for ti in 0..t {
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ch in 0..c {
                                da[s * c + ch] = da[s * c + ch] + wv.at(ki, ch) * g[ti * c + ch];
                            }
                        }
                    }
                }
                if wants(w) {
                    let dw = acc!(*w);
                    for ti in 0..t {
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ch in 0..c {
                                dw[ki * c + ch] = dw[ki * c + ch] + xv.at(s, ch) * g[ti * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Bce(p, labels) => {
                if wants(p) {
                    let eps = S::of(BCE_EPS);
                    let pv = val(p).data();
                    for (((d, &gv), &q), &l) in acc!(*p).iter_mut().zip(g).zip(pv).zip(labels) {
                        if q < eps || q > S::one() - eps {
                            continue;
                        }
                        *d = *d + gv * (q - l) / (q * (S::one() - q));
                    }
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    for d in acc!(*a).iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = S::of_usize(val(a).numel());
                    for d in acc!(*a).iter_mut() {
                        *d = *d + g[0] / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Checks every input element of `build` against central differences.
    /// The output is reduced to a scalar with fixed random weights.
    fn grad_check(
        seed: u64,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.input(t)).collect();
        let out = build(&mut g, &vars).unwrap();
        let (r, c) = (g.value(out).rows(), g.value(out).cols());
        let w = g.constant(rand_tensor(&mut rng, r, c));
        let weighted = g.mul(out, w).unwrap();
        let loss = g.sum(weighted).unwrap();
        let grads = g.backward(loss).unwrap();

        let h = 1e-4;
        for &v in &vars {
            let base = g.value(v).clone();
            let analytic = grads.wrt(v);
            for i in 0..base.numel() {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                g.set_leaf(v, plus).unwrap();
                g.replay().unwrap();
                let lp = g.value(loss).item();
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                g.set_leaf(v, minus).unwrap();
                g.replay().unwrap();
                let lm = g.value(loss).item();
                g.set_leaf(v, base.clone()).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
                assert!(rel <= 1e-4, "seed {seed} elem {i}: analytic {a} numeric {numeric}");
            }
        }
        g.replay().unwrap();
    }

    fn seeds() -> impl Iterator<Item = u64> {
        0..20
    }

    #[test]
    fn softmax_examples() {
        let m = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        // exp(k) / (e + e^2 + e^3) for k = 1, 2, 3, summed exactly beforehand
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_8];
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let empty = Tensor::<f64>::new(vec![0, 3], vec![]).unwrap();
        assert!(matches!(softmax_rows(&empty), Err(Error::EmptyInput)));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(20.0f64) - 1.0).abs() < 1e-8);
        assert!((sigmoid(1.0f64) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-16);
        for x in [-30.0, -3.2, -0.1, 0.0, 0.7, 12.0, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce(0.5f64, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce(1.0 - BCE_EPS, 1.0f64).unwrap() < 1e-6);
        assert!((bce(0.25f64, 0.0).unwrap() - (-(0.75f64).ln())).abs() < 1e-15);
        assert!(bce(0.0f64, 0.0).unwrap() < 1e-6);
        assert!(matches!(bce(0.3f64, 0.5), Err(Error::Label(_))));
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::scalar(0.3));
        assert!(g.bce(p, &[2.0]).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let out = g.sum(c).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.wrt(x).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_matmul_and_transpose() {
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 4, 2);
            let bt = rand_tensor(&mut rng, 5, 4);
            grad_check(seed, vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
            grad_check(seed, vec![a, bt], |g, v| g.matmul_t(v[0], v[1]));
        }
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 3, 4);
            let r = rand_tensor(&mut rng, 1, 4);
            grad_check(seed, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
            grad_check(seed, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
            grad_check(seed, vec![a.clone(), b], |g, v| g.mul(v[0], v[1]));
            grad_check(seed, vec![a.clone(), r.clone()], |g, v| g.add_row(v[0], v[1]));
            grad_check(seed, vec![a.clone(), r], |g, v| g.mul_row(v[0], v[1]));
            grad_check(seed, vec![a], |g, v| g.affine(v[0], -0.7, 0.3));
        }
    }

    #[test]
    fn grad_nonlinearities() {
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 3, 5);
            grad_check(seed, vec![a.clone()], |g, v| g.sigmoid(v[0]));
            grad_check(seed, vec![a.clone()], |g, v| g.tanh(v[0]));
            grad_check(seed, vec![a.clone()], |g, v| g.silu(v[0]));
            grad_check(seed, vec![a.clone()], |g, v| g.softmax_rows(v[0]));
            grad_check(seed, vec![a], |g, v| g.layer_norm_rows(v[0]));
        }
    }

    #[test]
    fn grad_structural_ops() {
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 2, 4);
            let c = rand_tensor(&mut rng, 3, 2);
            grad_check(seed, vec![a.clone(), b], |g, v| g.concat_rows(&[v[0], v[1]]));
            grad_check(seed, vec![a.clone(), c], |g, v| g.concat_cols(&[v[0], v[1]]));
            grad_check(seed, vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2));
            grad_check(seed, vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
            grad_check(seed, vec![a.clone()], |g, v| g.gather(v[0], &[2, 0, 2, 1]));
            let frames = rand_tensor(&mut rng, 7, 3);
            grad_check(seed, vec![frames.clone()], |g, v| g.stack_frames(v[0], 2));
            let kernel = rand_tensor(&mut rng, 3, 3);
            grad_check(seed, vec![frames, kernel], |g, v| g.depthwise_conv(v[0], v[1]));
            grad_check(seed, vec![a.clone()], |g, v| g.sum(v[0]));
            grad_check(seed, vec![a], |g, v| g.mean(v[0]));
        }
    }

    #[test]
    fn grad_bce() {
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..0.9)).collect();
            let labels: Vec<f64> = (0..6).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let p = Tensor::matrix(2, 3, p).unwrap();
            grad_check(seed, vec![p], move |g, v| g.bce(v[0], &labels));
        }
    }

    #[test]
    fn grad_gru_cell() {
        // one GRU step: h' = (1 - z) * n + z * h
        for seed in seeds() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, 1, 3);
            let h = rand_tensor(&mut rng, 1, 2);
            let wi = rand_tensor(&mut rng, 3, 6);
            let wh = rand_tensor(&mut rng, 2, 6);
            grad_check(seed, vec![x, h, wi, wh], |g, v| {
                let xi = g.matmul(v[0], v[2])?;
                let hh = g.matmul(v[1], v[3])?;
                let (xr, xz, xn) = (g.slice_cols(xi, 0, 2)?, g.slice_cols(xi, 2, 2)?, g.slice_cols(xi, 4, 2)?);
                let (hr, hz, hn) = (g.slice_cols(hh, 0, 2)?, g.slice_cols(hh, 2, 2)?, g.slice_cols(hh, 4, 2)?);
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z)?;
                let rh = g.mul(r, hn)?;
                let n = g.add(xn, rh)?;
                let n = g.tanh(n)?;
                let one_minus_z = g.affine(z, -1.0, 1.0)?;
                let a = g.mul(one_minus_z, n)?;
                let b = g.mul(z, v[1])?;
                g.add(a, b)
            });
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let a = g.input(rand_tensor(&mut rng, 4, 3));
        let w = g.input(rand_tensor(&mut rng, 3, 3));
        let h = g.matmul(a, w).unwrap();
        let h = g.layer_norm_rows(h).unwrap();
        let s = g.softmax_rows(h).unwrap();
        let before = g.value(s).clone();
        g.replay().unwrap();
        assert_eq!(g.value(s).data(), before.data());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_rows(a, 1, 2).is_err());
        assert!(matches!(g.gather(a, &[5]), Err(Error::IdOutOfRange { id: 5, size: 2 })));
    }

    #[test]
    fn stack_frames_pads_tail() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
        let y = g.stack_frames(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 0.0]);
    }
}
