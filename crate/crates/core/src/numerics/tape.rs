//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and the inputs it was
//! computed from. [`Tape::backward`] walks the nodes in reverse from a scalar
//! loss and accumulates adjoints; only nodes that depend on a watched leaf
//! take part, so frozen weights cost nothing in the backward pass.
//!
//! Values are stored as `Cow` so parameters can be borrowed instead of copied
//! onto the tape. A tape can be differentiated many times from different
//! scalar nodes, which is how per-token gradients are obtained.

use alloc::borrow::Cow;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::params::{Gradients, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Var, Var),
    Embed(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ReplaceRow(Var, usize, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Dot(Var, Var),
    Opaque(&'static str),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Embed(..) => "embed",
            Op::Gather(..) => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ReplaceRow(..) => "replace_row",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Dot(..) => "dot",
            Op::Opaque(name) => name,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    /// Address of the borrowed tensor for watched parameter leaves.
    source: Option<usize>,
}

/// Records one loss evaluation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims2(t: &Tensor, op: &str) -> (usize, usize) {
    assert!(t.shape().len() == 2, "{op} expects a matrix, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad, source: None });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed tensor that receives no gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: false, source: None });
        Var(self.nodes.len() - 1)
    }

    /// Owned tensor that receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false, source: None });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed parameter whose gradient is collected by [`Adjoints::wrt`].
    pub fn watch(&mut self, t: &'a Tensor) -> Var {
        let source = Some(t as *const Tensor as usize);
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: true, source });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf whose gradient is read back with [`Adjoints::get`].
    pub fn watch_owned(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: true, source: None });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally computed value with no derivative rule.
    /// Backward fails if gradient has to flow through it.
    pub fn opaque(&mut self, name: &'static str, value: Tensor, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque(name), inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a), "matmul");
        let (k2, n) = dims2(self.value(b), "matmul");
        assert_eq!(k, k2, "matmul inner dimensions");
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a), "matmul_t");
        let (n, k2) = dims2(self.value(b), "matmul_t");
        assert_eq!(k, k2, "matmul_t inner dimensions");
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_raw(vec![m, n], out), Op::MatMulT(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{} shapes", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a row vector `[n]` to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        assert_eq!(tr.len(), n, "add_row width");
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), libm::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| kernels::gelu(x).0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), libm::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), libm::log)
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::ClampMin(a, floor), |x| if x > floor { x } else { floor })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), Op::Softmax(a), &[a])
    }

    /// Row softmax where row `i` only sees columns `j <= i + offset`; hidden entries are 0.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Var {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "causal_softmax");
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let visible = (i + offset + 1).min(n);
            let row = &mut data[i * n..(i + 1) * n];
            kernels::softmax_in_place(&mut row[..visible]);
            for x in &mut row[visible..] {
                *x = 0.0;
            }
        }
        self.push(Tensor::from_raw(vec![m, n], data), Op::CausalSoftmax(a), &[a])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = kernels::log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert!(g.len() == n && b.len() == n, "layer_norm parameter width");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, inv_std) = kernels::row_moments(row, LAYER_NORM_EPS);
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_raw(shape, data), Op::LayerNorm(a, gain, bias), &[a, gain, bias])
    }

    /// Rows of `table: [V, d]` selected by `indices`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Var {
        let tt = self.value(table);
        let (rows, d) = dims2(tt, "embed");
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < rows, "embed index {i} out of range {rows}");
            data.extend_from_slice(tt.row(i));
        }
        self.push(Tensor::from_raw(vec![indices.len(), d], data), Op::Embed(table, indices.to_vec()), &[table])
    }

    /// Flat-index gather producing a vector.
    pub fn gather(&mut self, a: Var, flat_indices: &[usize]) -> Var {
        let ta = self.value(a);
        let data = flat_indices.iter().map(|&i| ta.data()[i]).collect();
        self.push(
            Tensor::from_raw(vec![flat_indices.len()], data),
            Op::Gather(a, flat_indices.to_vec()),
            &[a],
        )
    }

    pub fn element(&mut self, a: Var, flat_index: usize) -> Var {
        let v = self.gather(a, &[flat_index]);
        self.reshape(v, &[])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, n) = dims2(ta, "concat_rows");
        let (mb, n2) = dims2(tb, "concat_rows");
        assert_eq!(n, n2, "concat_rows width");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        self.push(Tensor::from_raw(vec![ma + mb, n], data), Op::ConcatRows(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = dims2(self.value(parts[0]), "concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (mi, ni) = dims2(self.value(*p), "concat_cols");
                assert_eq!(mi, m, "concat_cols rows");
                ni
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(Tensor::from_raw(vec![m, total], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "slice_cols");
        assert!(start + len <= n, "slice_cols range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        self.push(Tensor::from_raw(vec![m, len], data), Op::SliceCols(a, start, len), &[a])
    }

    /// Copy of `a: [m, n]` with row `row` replaced by the vector `v: [n]`.
    pub fn replace_row(&mut self, a: Var, row: usize, v: Var) -> Var {
        let (ta, tv) = (self.value(a), self.value(v));
        let (m, n) = dims2(ta, "replace_row");
        assert!(row < m && tv.len() == n, "replace_row bounds");
        let mut data = ta.data().to_vec();
        data[row * n..(row + 1) * n].copy_from_slice(tv.data());
        self.push(Tensor::from_raw(vec![m, n], data), Op::ReplaceRow(a, row, v), &[a, v])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), ta.len(), "reshape size");
        let data = ta.data().to_vec();
        self.push(Tensor::from_raw(shape.to_vec(), data), Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = kernels::sum(ta.data()) / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column means of `a: [m, n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "mean_rows");
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (acc, x) in data.iter_mut().zip(ta.row(i)) {
                *acc += x;
            }
        }
        for x in &mut data {
            *x /= m as f64;
        }
        self.push(Tensor::from_raw(vec![n], data), Op::MeanRows(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "dot lengths");
        let s = kernels::dot(ta.data(), tb.data());
        self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut leaves, i)?;
        }
        Ok(Adjoints { leaves })
    }

    fn propagate(
        &self,
        node: &Node<'a>,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut Vec<(Var, Option<usize>, Tensor)>,
        index: usize,
    ) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {
                leaves.push((Var(index), node.source, Tensor::from_raw(node.value.shape().to_vec(), g)));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a), "matmul");
                let n = val(*b).shape()[1];
                if self.requires_grad(*a) {
                    let ga = kernels::matmul_nt(&g, val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul_tn(val(*a).data(), &g, m, k, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(val(*a), "matmul_t");
                let n = val(*b).shape()[0];
                if self.requires_grad(*a) {
                    let ga = kernels::matmul(&g, val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul_tn(&g, val(*a).data(), m, n, k);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, &g);
                self.accumulate(grads, *b, &g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, &g);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a).data(), val(*b).data());
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g.iter().zip(xb).map(|(g, d)| g / d).collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> =
                        g.iter().zip(xa.iter().zip(xb)).map(|(g, (n, d))| -g * n / (d * d)).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, &g);
                if self.requires_grad(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (acc, x) in gr.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, &gr);
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, &g),
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> =
                    g.iter().zip(val(*a).data()).map(|(g, x)| g * kernels::gelu(*x).1).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::ClampMin(a, floor) => {
                let ga: Vec<f64> =
                    g.iter().zip(val(*a).data()).map(|(g, x)| if x > floor { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = kernels::sum(gr);
                    for j in 0..n {
                        out[j] = gr[j] - libm::exp(yr[j]) * s;
                    }
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::LayerNorm(a, gain, bias) => {
                let x = val(*a).data();
                let gv = val(*gain).data();
                let n = gv.len();
                let mut ga = vec![0.0; x.len()];
                let mut g_gain = vec![0.0; n];
                let mut g_bias = vec![0.0; n];
                for ((xr, gr), out) in x.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let (mean, inv_std) = kernels::row_moments(xr, LAYER_NORM_EPS);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gx = gr[j] * gv[j];
                        g_gain[j] += gr[j] * xhat;
                        g_bias[j] += gr[j];
                        m1 += gx;
                        m2 += gx * xhat;
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        out[j] = inv_std * (gr[j] * gv[j] - m1 - xhat * m2);
                    }
                }
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*gain) {
                    self.accumulate(grads, *gain, &g_gain);
                }
                if self.requires_grad(*bias) {
                    self.accumulate(grads, *bias, &g_bias);
                }
            }
            Op::Embed(table, indices) => {
                let tv = val(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (acc, x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, &gt);
            }
            Op::Gather(a, indices) => {
                let mut ga = vec![0.0; val(*a).len()];
                for (r, &i) in indices.iter().enumerate() {
                    ga[i] += g[r];
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                self.accumulate(grads, *a, &g[..split]);
                self.accumulate(grads, *b, &g[split..]);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (m, n) = dims2(val(*a), "slice_cols");
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::ReplaceRow(a, row, v) => {
                let n = val(*a).cols();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for x in &mut ga[row * n..(row + 1) * n] {
                        *x = 0.0;
                    }
                    self.accumulate(grads, *a, &ga);
                }
                self.accumulate(grads, *v, &g[row * n..(row + 1) * n]);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                self.accumulate(grads, *a, &ga);
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                let ga = vec![g[0] / len as f64; len];
                self.accumulate(grads, *a, &ga);
            }
            Op::MeanRows(a) => {
                let (m, n) = dims2(val(*a), "mean_rows");
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(g.iter().map(|x| x / m as f64));
                }
                self.accumulate(grads, *a, &ga);
            }
            Op::Dot(a, b) => {
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = val(*b).data().iter().map(|x| g[0] * x).collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = val(*a).data().iter().map(|x| g[0] * x).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Opaque(name) => return Err(Error::UnsupportedPrimitive(name.to_string())),
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Gradients of one backward pass with respect to the watched leaves.
#[derive(Debug, Clone)]
pub struct Adjoints {
    leaves: Vec<(Var, Option<usize>, Tensor)>,
}

impl Adjoints {
    /// Gradient of an owned watched leaf, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(var, _, _)| *var == v).map(|(_, _, t)| t)
    }

    /// One gradient per trainable tensor of `params`; tensors the loss does
    /// not reach get zeros, frozen tensors get nothing.
    pub fn wrt(&self, params: &ParameterSet) -> Gradients {
        let entries = params
            .trainable_indices()
            .map(|i| {
                let t = params.tensor(i);
                let addr = t as *const Tensor as usize;
                let mut acc = Tensor::zeros(t.shape());
                for (_, src, g) in &self.leaves {
                    if *src == Some(addr) {
                        for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += x;
                        }
                    }
                }
                (i, acc)
            })
            .collect();
        Gradients::from_entries(entries)
    }
}

/// Runs the reverse pass from `loss` and collects gradients for `params`.
pub fn backward_gradients(tape: &Tape<'_>, loss: Var, params: &ParameterSet) -> Result<Gradients> {
    Ok(tape.backward(loss)?.wrt(params))
}
