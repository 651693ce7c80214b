//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. The
//! node stores its value, the op that produced it and the FLOP count of the
//! forward evaluation, so one tape serves inference, training and cost
//! accounting. [`Tape::backward`] walks the nodes in reverse creation order.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use nalgebra::Matrix3;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::linalg::svd3;

/// Epsilon inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Mask = Rc<Vec<bool>>;
type Groups = Rc<Vec<Vec<usize>>>;

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
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var, Option<Mask>),
    LogSoftmaxRows(Var, Option<Mask>),
    LayerNormRows(Var),
    DwConv1d(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SegmentMax(Var, Rc<Vec<usize>>),
    SegmentSoftmax(Var, Groups),
    SelectiveScan(Box<ScanSaved>),
    Kabsch(Var),
}

#[derive(Debug, Clone)]
struct ScanSaved {
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    /// Hidden states, laid out `[t][channel][state]`.
    h: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNormRows(_) => "layernorm_rows",
            Op::DwConv1d(..) => "dwconv1d",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::SegmentMax(..) => "segment_max",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SelectiveScan(_) => "selective_scan",
            Op::Kabsch(_) => "kabsch",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b)
            | Op::MulScalar(a, b)
            | Op::DwConv1d(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a, _)
            | Op::LogSoftmaxRows(a, _)
            | Op::LayerNormRows(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SegmentMax(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Kabsch(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SelectiveScan(s) => vec![s.x, s.delta, s.a, s.b, s.c, s.d],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    flops: u64,
}

/// One entry of the forward trace, used for FLOP and memory accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub id: usize,
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub shape: (usize, usize),
    pub flops: u64,
}

impl OpRecord {
    pub fn bytes(&self) -> usize {
        self.shape.0 * self.shape.1 * std::mem::size_of::<f64>()
    }
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ZOH input factor `(e^z − 1) / z`, with its series limit near zero.
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

fn zoh_factor_deriv(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, flops: u64) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
            flops,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            flops: 0,
        });
        Var(nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            flops: 0,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copy of `v`'s value as a constant: gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Forward trace of every node, in creation order.
    pub fn trace(&self) -> Vec<OpRecord> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| OpRecord {
                id,
                kind: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                shape: n.value.shape(),
                flops: n.flops,
            })
            .collect()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            av.matmul(&bv)?
        };
        let (m, k) = self.shape(a);
        let n = out.cols();
        Ok(self.push(out, Op::MatMul(a, b), 2 * (m * k * n) as u64))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), 0)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            check_same(name, &av, &bv)?;
            av.zip_map(&bv, f)
        };
        let n = out.len() as u64;
        Ok(self.push(out, op, n))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn broadcast(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        along_rows: bool,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, n) = av.shape();
            let want = if along_rows { (1, n) } else { (m, 1) };
            if bv.shape() != want {
                return Err(shape_err(
                    name,
                    format!("{:?} with {:?}, expected {:?}", av.shape(), bv.shape(), want),
                ));
            }
            let mut out = av.clone();
            for r in 0..m {
                for c in 0..n {
                    let bb = if along_rows { bv.data()[c] } else { bv.data()[r] };
                    out.set(r, c, f(av.get(r, c), bb));
                }
            }
            out
        };
        let n = out.len() as u64;
        Ok(self.push(out, op, n))
    }

    /// `a (m×n) + b (1×n)` broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("add_row", a, b, true, |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a (m×n) ⊙ b (1×n)` broadcast over rows.
    pub fn mul_row(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("mul_row", a, b, true, |x, y| x * y, Op::MulRow(a, b))
    }

    /// `a (m×n) + b (m×1)` broadcast over columns.
    pub fn add_col(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("add_col", a, b, false, |x, y| x + y, Op::AddCol(a, b))
    }

    /// `a (m×n) ⊙ b (m×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast("mul_col", a, b, false, |x, y| x * y, Op::MulCol(a, b))
    }

    /// `a · s` for a `1×1` variable `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let (av, sv) = (self.value(a), self.value(s));
            if sv.shape() != (1, 1) {
                return Err(shape_err("mul_scalar", format!("scalar is {:?}", sv.shape())));
            }
            let k = sv.item();
            av.map(|x| x * k)
        };
        let n = out.len() as u64;
        Ok(self.push(out, Op::MulScalar(a, s), n))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let n = out.len() as u64;
        self.push(out, Op::Scale(a, k), n)
    }

    pub fn offset(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let n = out.len() as u64;
        self.push(out, Op::Offset(a), n)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op, cost: u64) -> Var {
        let out = self.value(a).map(f);
        let n = out.len() as u64;
        self.push(out, op, n * cost)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a), 1)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a), 1)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a), 1)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a), 1)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a), 4)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a), 5)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a), 4)
    }

    /// `max(a, lo)`; gradient passes where `a >= lo`.
    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo), 1)
    }

    fn check_mask(&self, a: Var, mask: &Option<Mask>) -> Result<()> {
        if let Some(m) = mask
            && m.len() != self.value(a).len() {
                return Err(shape_err("softmax", "mask length differs from input"));
            }
        Ok(())
    }

    /// Row-wise softmax; masked-out entries (`false`) get probability zero.
    /// A fully masked row produces zeros.
    pub fn softmax_rows(&self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        self.check_mask(a, &mask)?;
        let out = {
            let av = self.value(a);
            softmax_rows_raw(&av, mask.as_deref().map(|m| m.as_slice()), false)
        };
        let n = out.len() as u64;
        Ok(self.push(out, Op::SoftmaxRows(a, mask), 5 * n))
    }

    /// Row-wise log-softmax with the same masking rules as [`Tape::softmax_rows`];
    /// masked entries are reported as 0 and receive no gradient.
    pub fn log_softmax_rows(&self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        self.check_mask(a, &mask)?;
        let out = {
            let av = self.value(a);
            softmax_rows_raw(&av, mask.as_deref().map(|m| m.as_slice()), true)
        };
        let n = out.len() as u64;
        Ok(self.push(out, Op::LogSoftmaxRows(a, mask), 5 * n))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layernorm_rows(&self, a: Var) -> Var {
        let out = {
            let av = self.value(a);
            let (m, n) = av.shape();
            let mut out = av.clone();
            for r in 0..m {
                let row = out.row_slice_mut(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
            out
        };
        let n = out.len() as u64;
        self.push(out, Op::LayerNormRows(a), 7 * n)
    }

    /// Causal depthwise convolution of `x (L×C)` with `kernel (K×C)`:
    /// `y[t, c] = Σ_j kernel[j, c] · x[t − j, c]`, zero-padded on the left.
    pub fn dwconv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let out = {
            let (xv, kv) = (self.value(x), self.value(kernel));
            let (l, c) = xv.shape();
            let (k, kc) = kv.shape();
            if kc != c {
                return Err(shape_err(
                    "dwconv1d",
                    format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
                ));
            }
            let mut out = Tensor::zeros(l, c);
            for t in 0..l {
                for j in 0..k.min(t + 1) {
                    for ch in 0..c {
                        let v = out.get(t, ch) + kv.get(j, ch) * xv.get(t - j, ch);
                        out.set(t, ch, v);
                    }
                }
            }
            out
        };
        let (k, _) = self.shape(kernel);
        let n = out.len() as u64;
        Ok(self.push(out, Op::DwConv1d(x, kernel), 2 * n * k as u64))
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
                return Err(shape_err(
                    "gather_rows",
                    format!("row {bad} out of {}", av.rows()),
                ));
            }
            av.gather_rows(&idx)
        };
        Ok(self.push(out, Op::GatherRows(a, idx), 0))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if start + len > av.cols() || len == 0 {
                return Err(shape_err(
                    "slice_cols",
                    format!("{start}+{len} of {} columns", av.cols()),
                ));
            }
            let mut data = Vec::with_capacity(av.rows() * len);
            for r in 0..av.rows() {
                data.extend_from_slice(&av.row_slice(r)[start..start + len]);
            }
            Tensor::new(av.rows(), len, data)?
        };
        Ok(self.push(out, Op::SliceCols(a, start), 0))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, Rc::new((start..start + len).collect()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals.first().map(|v| v.rows()).ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
            if vals.iter().any(|v| v.rows() != rows) {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), 0))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals.first().map(|v| v.cols()).ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
            if vals.iter().any(|v| v.cols() != cols) {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), 0))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (s, n) = {
            let av = self.value(a);
            (av.sum(), av.len() as u64)
        };
        self.push(Tensor::scalar(s), Op::Sum(a), n)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, `m×1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = {
            let av = self.value(a);
            let sums: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
            Tensor::col(&sums)
        };
        let n = self.value(a).len() as u64;
        self.push(out, Op::SumRows(a), n)
    }

    /// Per-column sums, `1×n`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = {
            let av = self.value(a);
            let mut sums = vec![0.0; av.cols()];
            for r in 0..av.rows() {
                for (s, x) in sums.iter_mut().zip(av.row_slice(r)) {
                    *s += x;
                }
            }
            Tensor::row(&sums)
        };
        let n = self.value(a).len() as u64;
        self.push(out, Op::SumCols(a), n)
    }

    /// Column-wise max over each group of rows; every group must be non-empty.
    pub fn segment_max(&self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (out, argmax) = {
            let av = self.value(a);
            let cols = av.cols();
            let mut out = Tensor::zeros(groups.len(), cols);
            let mut argmax = vec![0usize; groups.len() * cols];
            for (g, rows) in groups.iter().enumerate() {
                let Some(&first) = rows.first() else {
                    return Err(shape_err("segment_max", format!("group {g} is empty")));
                };
                for c in 0..cols {
                    let mut best = first;
                    for &r in rows {
                        if r >= av.rows() {
                            return Err(shape_err("segment_max", "row index out of range"));
                        }
                        if av.get(r, c) > av.get(best, c) {
                            best = r;
                        }
                    }
                    out.set(g, c, av.get(best, c));
                    argmax[g * cols + c] = best;
                }
            }
            (out, argmax)
        };
        let n = self.value(a).len() as u64;
        Ok(self.push(out, Op::SegmentMax(a, Rc::new(argmax)), n))
    }

    /// Softmax of a column vector within each group of rows.
    pub fn segment_softmax(&self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if av.cols() != 1 {
                return Err(shape_err("segment_softmax", "expects a column vector"));
            }
            let mut out = Tensor::zeros(av.rows(), 1);
            for rows in groups.iter() {
                if rows.iter().any(|&r| r >= av.rows()) {
                    return Err(shape_err("segment_softmax", "row index out of range"));
                }
                let m = rows.iter().map(|&r| av.data()[r]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = rows.iter().map(|&r| (av.data()[r] - m).exp()).sum();
                for &r in rows {
                    out.data_mut()[r] = (av.data()[r] - m).exp() / z;
                }
            }
            out
        };
        let n = out.len() as u64;
        Ok(self.push(out, Op::SegmentSoftmax(a, groups), 5 * n))
    }

    /// Selective SSM scan with per-channel diagonal state.
    ///
    /// Shapes: `x, delta: M×C`, `a: C×N` (continuous state rates), `b, c: M×N`
    /// (input-dependent projections), `d: 1×C` (skip). For each step `t`,
    /// channel `ch` and state `n` with `z = delta[t,ch]·a[ch,n]`:
    /// `h = e^z · h + ((e^z − 1)/z) · delta[t,ch] · b[t,n] · x[t,ch]`,
    /// `y[t,ch] = Σ_n c[t,n] · h + d[ch] · x[t,ch]`.
    pub fn selective_scan(&self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (out, h, flops) = {
            let (xv, dv, av, bv, cv, skip) = (
                self.value(x),
                self.value(delta),
                self.value(a),
                self.value(b),
                self.value(c),
                self.value(d),
            );
            let (m, ch) = xv.shape();
            let n = av.cols();
            if dv.shape() != (m, ch)
                || av.rows() != ch
                || bv.shape() != (m, n)
                || cv.shape() != (m, n)
                || skip.shape() != (1, ch)
            {
                return Err(shape_err(
                    "selective_scan",
                    format!(
                        "x {:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
                        xv.shape(),
                        dv.shape(),
                        av.shape(),
                        bv.shape(),
                        cv.shape(),
                        skip.shape()
                    ),
                ));
            }
            let mut h = vec![0.0; m * ch * n];
            let mut y = Tensor::zeros(m, ch);
            for t in 0..m {
                for k in 0..ch {
                    let dt = dv.get(t, k);
                    let xk = xv.get(t, k);
                    let mut acc = skip.data()[k] * xk;
                    for s in 0..n {
                        let z = dt * av.get(k, s);
                        let prev = if t > 0 { h[((t - 1) * ch + k) * n + s] } else { 0.0 };
                        let hv = z.exp() * prev + zoh_factor(z) * dt * bv.get(t, s) * xk;
                        h[(t * ch + k) * n + s] = hv;
                        acc += cv.get(t, s) * hv;
                    }
                    y.set(t, k, acc);
                }
            }
            (y, h, scan_flops(m, ch, n))
        };
        Ok(self.push(
            out,
            Op::SelectiveScan(Box::new(ScanSaved {
                x,
                delta,
                a,
                b,
                c,
                d,
                h,
            })),
            flops,
        ))
    }

    /// Rotation maximizing `tr(R·H)` over SO(3) for a 3×3 cross-covariance
    /// `H = Σ w x̃ ỹᵀ`: `R = V·diag(1, 1, det(V Uᵀ))·Uᵀ` from `H = U Σ Vᵀ`.
    pub fn kabsch_rotation(&self, h: Var) -> Result<Var> {
        let out = {
            let hv = self.value(h);
            if hv.shape() != (3, 3) {
                return Err(shape_err("kabsch", format!("H is {:?}", hv.shape())));
            }
            let (r, _, _) = kabsch_parts(&to_mat3(&hv));
            from_mat3(&r)
        };
        Ok(self.push(out, Op::Kabsch(h), KABSCH_FLOPS))
    }

    // ------------------------------------------------------ composites

    /// `x · w + b` with `b` a `1×n` bias.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Euclidean norm of each row, `m×1`, with `eps` added under the root.
    pub fn row_norms(&self, a: Var, eps: f64) -> Var {
        let sq = self.square(a);
        let s = self.sum_rows(sq);
        let s = self.offset(s, eps);
        self.sqrt(s)
    }

    /// Rows scaled to unit length.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let n = self.row_norms(a, eps);
        let ones = self.constant(Tensor::full(self.shape(n).0, 1, 1.0));
        let inv = self.div(ones, n)?;
        self.mul_col(a, inv)
    }

    // ------------------------------------------------------ backward

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (rows, cols) = nodes[out.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contribs = backward_node(&nodes, node, &g);
            grads[id] = Some(g);
            for (v, gv) in contribs {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// FLOPs charged for one 3×3 Kabsch solve (SVD sweeps plus assembly).
pub const KABSCH_FLOPS: u64 = 600;

/// FLOPs of a selective scan over `m` steps, `ch` channels, `n` states:
/// 11 per (step, channel, state) for discretization, state update and
/// readout, plus 2 per (step, channel) for the skip path.
pub fn scan_flops(m: usize, ch: usize, n: usize) -> u64 {
    (11 * m * ch * n + 2 * m * ch) as u64
}

fn softmax_rows_raw(a: &Tensor, mask: Option<&[bool]>, log: bool) -> Tensor {
    let (m, n) = a.shape();
    let mut out = Tensor::zeros(m, n);
    for r in 0..m {
        let keep = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
        let row = a.row_slice(r);
        let mx = (0..n).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        // The first maximal entry contributes exactly 1; summing the rest
        // separately keeps log Σ accurate when one entry dominates.
        let arg = (0..n).find(|&c| keep(c) && row[c] == mx).unwrap_or(0);
        let rest: f64 = (0..n).filter(|&c| keep(c) && c != arg).map(|c| (row[c] - mx).exp()).sum();
        let z = 1.0 + rest;
        let lz = rest.ln_1p();
        let orow = out.row_slice_mut(r);
        for c in 0..n {
            if keep(c) {
                orow[c] = if log { row[c] - mx - lz } else { (row[c] - mx).exp() / z };
            }
        }
    }
    out
}

fn to_mat3(t: &Tensor) -> Matrix3<f64> {
    Matrix3::from_row_slice(t.data())
}

fn from_mat3(m: &Matrix3<f64>) -> Tensor {
    let mut t = Tensor::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            t.set(i, j, m[(i, j)]);
        }
    }
    t
}

/// Returns `(R, U, λ)` where `H·R = U·diag(λ)·Uᵀ` is the symmetric stationarity matrix.
pub(crate) fn kabsch_parts(h: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>, [f64; 3]) {
    let svd = svd3(h);
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let corr = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = svd.v * corr * svd.u.transpose();
    (r, svd.u, [svd.s[0], svd.s[1], d * svd.s[2]])
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => vec![
            (*a, matmul_nt(g, val(*b))),
            (*b, matmul_tn(val(*a), g)),
        ],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |x, y| x * y)),
            (*b, g.zip_map(val(*a), |x, y| x * y)),
        ],
        Op::Div(a, b) => {
            let bv = val(*b);
            vec![
                (*a, g.zip_map(bv, |x, y| x / y)),
                (*b, {
                    let t = g.zip_map(y, |gv, yv| gv * yv);
                    t.zip_map(bv, |x, d| -x / d)
                }),
            ]
        }
        Op::AddRow(a, b) => {
            let (m, n) = g.shape();
            let mut gb = vec![0.0; n];
            for r in 0..m {
                for (s, x) in gb.iter_mut().zip(g.row_slice(r)) {
                    *s += x;
                }
            }
            vec![(*a, g.clone()), (*b, Tensor::row(&gb))]
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, n) = g.shape();
            let mut ga = g.clone();
            let mut gb = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    ga.set(r, c, g.get(r, c) * bv.data()[c]);
                    gb[c] += g.get(r, c) * av.get(r, c);
                }
            }
            vec![(*a, ga), (*b, Tensor::row(&gb))]
        }
        Op::AddCol(a, b) => {
            let gb: Vec<f64> = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
            vec![(*a, g.clone()), (*b, Tensor::col(&gb))]
        }
        Op::MulCol(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, n) = g.shape();
            let mut ga = g.clone();
            let mut gb = vec![0.0; m];
            for r in 0..m {
                for c in 0..n {
                    ga.set(r, c, g.get(r, c) * bv.data()[r]);
                    gb[r] += g.get(r, c) * av.get(r, c);
                }
            }
            vec![(*a, ga), (*b, Tensor::col(&gb))]
        }
        Op::MulScalar(a, s) => {
            let k = val(*s).item();
            let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
            vec![(*a, g.map(|x| x * k)), (*s, Tensor::scalar(gs))]
        }
        Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, g.zip_map(y, |x, e| x * e))],
        Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, v| x / v))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(y, |x, s| 0.5 * x / s))],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), |x, v| 2.0 * x * v))],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |x, s| x * s * (1.0 - s)))],
        Op::Silu(a) => vec![(*a, g.zip_map(val(*a), |x, v| {
            let s = sigmoid(v);
            x * s * (1.0 + v * (1.0 - s))
        }))],
        Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |x, v| x * sigmoid(v)))],
        Op::ClampMin(a, lo) => vec![(*a, g.zip_map(val(*a), |x, v| if v >= *lo { x } else { 0.0 }))],
        Op::SoftmaxRows(a, mask) => {
            let (m, n) = g.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                let dot: f64 = gr.iter().zip(yr).map(|(x, p)| x * p).sum();
                let out = ga.row_slice_mut(r);
                for c in 0..n {
                    let keep = mask.as_ref().is_none_or(|mk| mk[r * n + c]);
                    if keep {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::LogSoftmaxRows(a, mask) => {
            let (m, n) = g.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let keep = |c: usize| mask.as_ref().is_none_or(|mk| mk[r * n + c]);
                let gr = g.row_slice(r);
                let yr = y.row_slice(r);
                let gsum: f64 = (0..n).filter(|&c| keep(c)).map(|c| gr[c]).sum();
                let out = ga.row_slice_mut(r);
                for c in 0..n {
                    if keep(c) {
                        out[c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::LayerNormRows(a) => {
            let av = val(*a);
            let (m, n) = g.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let row = av.row_slice(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                let gm = gr.iter().sum::<f64>() / n as f64;
                let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let out = ga.row_slice_mut(r);
                for c in 0..n {
                    out[c] = inv * (gr[c] - gm - yr[c] * gy);
                }
            }
            vec![(*a, ga)]
        }
        Op::DwConv1d(x, kernel) => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (l, c) = xv.shape();
            let k = kv.rows();
            let mut gx = Tensor::zeros(l, c);
            let mut gk = Tensor::zeros(k, c);
            for t in 0..l {
                for j in 0..k.min(t + 1) {
                    for ch in 0..c {
                        let gt = g.get(t, ch);
                        gx.set(t - j, ch, gx.get(t - j, ch) + gt * kv.get(j, ch));
                        gk.set(j, ch, gk.get(j, ch) + gt * xv.get(t - j, ch));
                    }
                }
            }
            vec![(*x, gx), (*kernel, gk)]
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            for (o, &i) in idx.iter().enumerate() {
                let src = g.row_slice(o).to_vec();
                for (d, s) in ga.row_slice_mut(i).iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![(*a, ga)]
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            let len = g.cols();
            for r in 0..g.rows() {
                ga.row_slice_mut(r)[*start..*start + len].copy_from_slice(g.row_slice(r));
            }
            vec![(*a, ga)]
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let w = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + w]);
                    }
                    off += w;
                    (p, gp)
                })
                .collect()
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let (h, w) = val(p).shape();
                    let gp = Tensor::new(h, w, g.data()[off * w..(off + h) * w].to_vec())
                        .expect("concat rows slice");
                    off += h;
                    (p, gp)
                })
                .collect()
        }
        Op::Sum(a) => {
            let (m, n) = val(*a).shape();
            vec![(*a, Tensor::full(m, n, g.item()))]
        }
        Op::SumRows(a) => {
            let (m, n) = val(*a).shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                ga.row_slice_mut(r).fill(g.data()[r]);
            }
            vec![(*a, ga)]
        }
        Op::SumCols(a) => {
            let (m, n) = val(*a).shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                ga.row_slice_mut(r).copy_from_slice(g.data());
            }
            vec![(*a, ga)]
        }
        Op::SegmentMax(a, argmax) => {
            let (m, n) = val(*a).shape();
            let mut ga = Tensor::zeros(m, n);
            for gi in 0..g.rows() {
                for c in 0..n {
                    let r = argmax[gi * n + c];
                    ga.set(r, c, ga.get(r, c) + g.get(gi, c));
                }
            }
            vec![(*a, ga)]
        }
        Op::SegmentSoftmax(a, groups) => {
            let mut ga = Tensor::zeros(y.rows(), 1);
            for rows in groups.iter() {
                let dot: f64 = rows.iter().map(|&r| g.data()[r] * y.data()[r]).sum();
                for &r in rows {
                    ga.data_mut()[r] = y.data()[r] * (g.data()[r] - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::SelectiveScan(s) => scan_backward(nodes, s, g),
        Op::Kabsch(h) => {
            let hv = to_mat3(val(*h));
            let (r, u, lam) = kabsch_parts(&hv);
            let gr = to_mat3(g);
            let a = r.transpose() * gr;
            let a_skew = (a - a.transpose()) * 0.5;
            let mut zp = u.transpose() * a_skew * u;
            for i in 0..3 {
                for j in 0..3 {
                    let den = lam[i] + lam[j];
                    zp[(i, j)] = if den.abs() > 1e-300 { zp[(i, j)] / den } else { 0.0 };
                }
            }
            let z = u * zp * u.transpose();
            let gh = -2.0 * z * r.transpose();
            vec![(*h, from_mat3(&gh))]
        }
    }
}

fn scan_backward(nodes: &[Node], s: &ScanSaved, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    let (xv, dv, av, bv, cv, skip) = (val(s.x), val(s.delta), val(s.a), val(s.b), val(s.c), val(s.d));
    let (m, ch) = xv.shape();
    let n = av.cols();
    let mut gx = Tensor::zeros(m, ch);
    let mut gd = Tensor::zeros(m, ch);
    let mut ga = Tensor::zeros(ch, n);
    let mut gb = Tensor::zeros(m, n);
    let mut gc = Tensor::zeros(m, n);
    let mut gskip = Tensor::zeros(1, ch);
    let h = &s.h;
    for k in 0..ch {
        for t in 0..m {
            let gy = g.get(t, k);
            gx.set(t, k, gx.get(t, k) + gy * skip.data()[k]);
            gskip.data_mut()[k] += gy * xv.get(t, k);
        }
        for st in 0..n {
            let a = av.get(k, st);
            let mut carry = 0.0;
            for t in (0..m).rev() {
                let gy = g.get(t, k);
                let ht = h[(t * ch + k) * n + st];
                gc.set(t, st, gc.get(t, st) + gy * ht);
                let gh = carry + cv.get(t, st) * gy;
                let dt = dv.get(t, k);
                let xk = xv.get(t, k);
                let bts = bv.get(t, st);
                let z = dt * a;
                let ea = z.exp();
                let phi = zoh_factor(z);
                let prev = if t > 0 { h[((t - 1) * ch + k) * n + st] } else { 0.0 };
                let g_ea = gh * prev;
                let gphi = gh * dt * bts * xk;
                let gz = g_ea * ea + gphi * zoh_factor_deriv(z);
                gd.set(t, k, gd.get(t, k) + gz * a + gh * phi * bts * xk);
                ga.set(k, st, ga.get(k, st) + gz * dt);
                gb.set(t, st, gb.get(t, st) + gh * phi * dt * xk);
                gx.set(t, k, gx.get(t, k) + gh * phi * dt * bts);
                carry = gh * ea;
            }
        }
    }
    vec![
        (s.x, gx),
        (s.delta, gd),
        (s.a, ga),
        (s.b, gb),
        (s.c, gc),
        (s.d, gskip),
    ]
}

/// Plain matrix product, exposed for callers outside the tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    Ok(matmul_raw(a, b))
}
