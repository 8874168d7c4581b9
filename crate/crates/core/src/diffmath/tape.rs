//! Reverse-mode recording of tensor computations.
//!
//! Every operation appends a node holding its value and the operands it was
//! computed from. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates vector-Jacobian products; parameter leaves then hand their
//! gradients to the [`ParamStore`] they were read from.

use std::sync::Arc;

use super::{CsrMatrix, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unary transforms exposed through [`Tape::apply_unary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    SoftmaxRows,
    LayerNormRows,
    Abs,
    Sign,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var),
    Sum(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Vec<usize>>),
    RowScale(Var, Var),
    RowDot(Var, Var),
    GroupGram(Var, Var, Arc<Vec<usize>>, usize),
    SoftThreshold(Var, Var),
    Spmm(Arc<CsrMatrix>, Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    Pick(Var, Arc<Vec<(usize, usize)>>),
    MaskMul(Var, Arc<Vec<f64>>),
    StraightThrough(Var),
    ClampLog(Var, f64),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNormRows(..) => "layernorm_rows",
            Op::Sum(..) => "sum",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::RowScale(..) => "row_scale",
            Op::RowDot(..) => "row_dot",
            Op::GroupGram(..) => "group_gram",
            Op::SoftThreshold(..) => "soft_threshold",
            Op::Spmm(..) => "spmm",
            Op::ConcatCols(..) => "concat_cols",
            Op::Column(..) => "column",
            Op::Pick(..) => "pick",
            Op::MaskMul(..) => "mask_mul",
            Op::StraightThrough(..) => "straight_through",
            Op::ClampLog(..) => "clamp_log",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when `v` did not influence the output.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
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

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient but is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a parameter; repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Node created for parameter `id`, if it was read on this tape.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(t, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        super::tensor::matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.make(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(b).len() != n || self.shape(a).len() != 2 {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bias = self.data(b);
        let mut out = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(n.max(1)) {
            out.extend(row.iter().zip(bias).map(|(x, y)| x + y));
        }
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + c).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::AddConst(a), ng)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar operand {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let out = self.data(a).iter().map(|x| x * sv).collect();
        let ng = self.ng(a) || self.ng(s);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::MulScalar(a, s), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.data(a).iter().map(|x| f(*x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.make(shape, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Elementwise sign; piecewise constant, so it carries no gradient.
    pub fn sign(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| sign(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::Leaf, false)
    }

    fn require_rank2(&self, op: &'static str, a: Var) -> Result<()> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim(op, format!("needs rank 2, got {:?}", self.shape(a))));
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.require_rank2("softmax_rows", a)?;
        let c = self.value(a).cols();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::SoftmaxRows(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.require_rank2("log_softmax_rows", a)?;
        let c = self.value(a).cols();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::LogSoftmaxRows(a), ng))
    }

    pub fn layernorm_rows(&mut self, a: Var) -> Result<Var> {
        self.require_rank2("layernorm_rows", a)?;
        let c = self.value(a).cols();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let (mean, sd) = row_moments(row);
            for x in row.iter_mut() {
                *x = (*x - mean) / sd;
            }
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::LayerNormRows(a), ng))
    }

    pub fn apply_unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        match f {
            Unary::Relu => Ok(self.relu(a)),
            Unary::SoftmaxRows => self.softmax_rows(a),
            Unary::LayerNormRows => self.layernorm_rows(a),
            Unary::Abs => Ok(self.abs(a)),
            Unary::Sign => Ok(self.sign(a)),
        }
    }

    /// Sum of all entries, left to right.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(0.0, |acc, x| acc + x);
        let ng = self.ng(a);
        self.make(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn row_shape(&self, a: Var, rows: usize) -> Vec<usize> {
        let mut shape = self.shape(a).to_vec();
        if shape.is_empty() {
            shape.push(rows);
        } else {
            shape[0] = rows;
        }
        shape
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let (m, c) = (t.rows(), t.cols());
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("index {bad} >= {m} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let shape = self.row_shape(a, idx.len());
        let ng = self.ng(a);
        Ok(self.make(shape, out, Op::GatherRows(a, idx), ng))
    }

    /// Output row `s` is the sum of input rows `r` with `seg[r] == s`, for `s < n`.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, c) = (t.rows(), t.cols());
        if seg.len() != m {
            return Err(Error::dim("segment_sum", format!("{} segment ids for {m} rows", seg.len())));
        }
        if let Some(bad) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::dim("segment_sum", format!("segment {bad} >= {n}")));
        }
        let mut out = vec![0.0; n * c];
        for (r, &s) in seg.iter().enumerate() {
            let src = &t.data()[r * c..(r + 1) * c];
            for (o, x) in out[s * c..(s + 1) * c].iter_mut().zip(src) {
                *o += x;
            }
        }
        let shape = self.row_shape(a, n);
        let ng = self.ng(a);
        Ok(self.make(shape, out, Op::SegmentSum(a, seg), ng))
    }

    /// Scales row `r` of `a` by `s[r]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(s).len() != m {
            return Err(Error::dim("row_scale", format!("{m} rows, {} scales", self.value(s).len())));
        }
        let mut out = Vec::with_capacity(self.data(a).len());
        for (row, k) in self.data(a).chunks(c.max(1)).zip(self.data(s)) {
            out.extend(row.iter().map(|x| x * k));
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(s);
        Ok(self.make(shape, out, Op::RowScale(a, s), ng))
    }

    /// Per-row inner products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (m, c) = (self.value(a).rows(), self.value(a).cols());
        let out = self
            .data(a)
            .chunks(c.max(1))
            .zip(self.data(b).chunks(c.max(1)))
            .map(|(x, y)| x.iter().zip(y).fold(0.0, |acc, (p, q)| acc + p * q))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.make(vec![m], out, Op::RowDot(a, b), ng))
    }

    /// `y_r = a_r · Σ_{seg[r'] = seg[r]} x_{r'} a_{r'}`: each row's Gram
    /// product within its segment, without recording the `n × c` sums.
    pub fn group_gram(&mut self, a: Var, x: Var, seg: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let m = self.value(a).rows();
        if self.value(x).len() != m || seg.len() != m {
            return Err(Error::dim("group_gram", format!("{m} rows, {} weights, {} segment ids", self.value(x).len(), seg.len())));
        }
        if let Some(bad) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::dim("group_gram", format!("segment {bad} >= {n}")));
        }
        let c = self.value(a).cols().max(1);
        let u = segment_weighted(self.data(a), self.data(x), &seg, n, c);
        let out = row_dots_by_segment(self.data(a), &u, &seg, c);
        let ng = self.ng(a) || self.ng(x);
        Ok(self.make(vec![m], out, Op::GroupGram(a, x, seg, n), ng))
    }

    /// `sign(x)·max(|x| − τ, 0)` elementwise with a per-entry threshold.
    pub fn soft_threshold(&mut self, x: Var, tau: Var) -> Result<Var> {
        self.same_shape("soft_threshold", x, tau)?;
        let out = self
            .data(x)
            .iter()
            .zip(self.data(tau))
            .map(|(v, t)| sign(*v) * (v.abs() - t).max(0.0))
            .collect();
        let ng = self.ng(x) || self.ng(tau);
        let shape = self.shape(x).to_vec();
        Ok(self.make(shape, out, Op::SoftThreshold(x, tau), ng))
    }

    /// Constant sparse matrix times a dense operand.
    pub fn spmm(&mut self, s: Arc<CsrMatrix>, a: Var) -> Result<Var> {
        let t = self.value(a);
        if s.cols() != t.rows() {
            return Err(Error::dim("spmm", format!("{}x{} · {}x{}", s.rows(), s.cols(), t.rows(), t.cols())));
        }
        let width = t.cols();
        let out = s.mul_dense(t.data(), width);
        let shape = vec![s.rows(), width];
        let ng = self.ng(a);
        Ok(self.make(shape, out, Op::Spmm(s, a), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dim("concat_cols", format!("{} vs {} rows", ta.rows(), tb.rows())));
        }
        let (m, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.make(vec![m, ca + cb], out, Op::ConcatCols(a, b), ng))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if j >= t.cols() {
            return Err(Error::dim("column", format!("column {j} of {}", t.cols())));
        }
        let out = (0..t.rows()).map(|r| t.at(r, j)).collect::<Vec<_>>();
        let m = out.len();
        let ng = self.ng(a);
        Ok(self.make(vec![m], out, Op::Column(a, j), ng))
    }

    /// Picks entries `(row, col)` of a matrix into a vector.
    pub fn pick(&mut self, a: Var, at: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&(r, c)) = at.iter().find(|(r, c)| *r >= t.rows() || *c >= t.cols()) {
            return Err(Error::dim("pick", format!("({r},{c}) outside {:?}", t.shape())));
        }
        let out: Vec<f64> = at.iter().map(|&(r, c)| t.at(r, c)).collect();
        let ng = self.ng(a);
        Ok(self.make(vec![out.len()], out, Op::Pick(a, at), ng))
    }

    /// Multiplies by a constant mask of the same length (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("mask_mul", format!("{} vs {}", mask.len(), self.value(a).len())));
        }
        let out = self.data(a).iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::MaskMul(a, mask), ng))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape(soft)),
            ));
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    /// `ln(max(a, floor))`; entries at the floor pass no gradient.
    pub fn clamp_log(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::ClampLog(a, floor), |x| x.max(floor).ln())
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// First node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Whether `target` lies on a recorded path into `output`.
    pub fn is_connected(&self, output: Var, target: Var) -> bool {
        let mut reach = vec![false; output.0 + 1];
        reach[output.0] = true;
        for i in (0..=output.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == target.0 {
                return true;
            }
            for p in parents(&self.nodes[i].op) {
                reach[p.0] = true;
            }
        }
        false
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss shape {:?} is not scalar", self.shape(loss))));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("backward_with", "seed length differs from output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss`, adding every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate_params(&grads, store);
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if grads.get(*v).is_none() {
                    log::debug!("parameter {} is disconnected from the loss", store.name(ParamId(id)));
                }
            }
        }
        Ok(grads)
    }

    pub fn accumulate_params(&self, grads: &Gradients, store: &mut ParamStore) {
        for v in self.param_vars.iter().flatten() {
            let Op::Param(id) = self.nodes[v.0].op else { continue };
            match grads.get(*v) {
                Some(g) => store.get_mut(id).accumulate_grad(g),
                None => {
                    let zeros = vec![0.0; store.get(id).len()];
                    store.get_mut(id).accumulate_grad(&zeros);
                }
            }
        }
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let ga = slot(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += dot(grow, brow);
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (x, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *x += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, g.iter().zip(db).map(|(x, y)| x * y));
                self.acc(grads, *b, g.iter().zip(da).map(|(x, y)| x * y));
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, g.iter().zip(db).map(|(x, y)| x / y));
                self.acc(
                    grads,
                    *b,
                    g.iter().zip(da).zip(db).map(|((x, p), q)| -x * p / (q * q)),
                );
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                if self.ng(*b) {
                    let n = self.value(*b).len();
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n.max(1)) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|x| x * c)),
            Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                self.acc(grads, *a, g.iter().copied())
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                self.acc(grads, *a, g.iter().map(|x| x * sv));
                if self.ng(*s) {
                    let total = g.iter().zip(self.data(*a)).fold(0.0, |acc, (x, y)| acc + x * y);
                    slot(grads, *s, 1)[0] += total;
                }
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, g.iter().zip(da).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }));
            }
            Op::Abs(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, g.iter().zip(da).map(|(x, v)| x * sign(*v)));
            }
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(out).map(|(x, y)| x * y)),
            Op::Log(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, g.iter().zip(da).map(|(x, v)| x / v));
            }
            Op::Sqrt(a) => self.acc(grads, *a, g.iter().zip(out).map(|(x, y)| x / (2.0 * y))),
            Op::SoftmaxRows(a) => {
                let c = node.value.cols().max(1);
                let mut buf = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(out.chunks(c)) {
                    let s = dot(grow, yrow);
                    buf.extend(grow.iter().zip(yrow).map(|(x, y)| y * (x - s)));
                }
                self.acc(grads, *a, buf.into_iter());
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols().max(1);
                let mut buf = Vec::with_capacity(g.len());
                for (grow, lrow) in g.chunks(c).zip(out.chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    buf.extend(grow.iter().zip(lrow).map(|(x, l)| x - l.exp() * s));
                }
                self.acc(grads, *a, buf.into_iter());
            }
            Op::LayerNormRows(a) => {
                let c = node.value.cols().max(1);
                let da = self.data(*a);
                let mut buf = Vec::with_capacity(g.len());
                for ((grow, yrow), xrow) in g.chunks(c).zip(out.chunks(c)).zip(da.chunks(c)) {
                    let (_, sd) = row_moments(xrow);
                    let gm = grow.iter().sum::<f64>() / c as f64;
                    let gym = dot(grow, yrow) / c as f64;
                    buf.extend(grow.iter().zip(yrow).map(|(x, y)| (x - gm - y * gym) / sd));
                }
                self.acc(grads, *a, buf.into_iter());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, y) in ga[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SegmentSum(a, seg) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    for (r, &s) in seg.iter().enumerate() {
                        for (x, y) in ga[r * c..(r + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::RowScale(a, s) => {
                let ta = self.value(*a);
                let c = ta.cols().max(1);
                let sv = self.data(*s);
                if self.ng(*a) {
                    let ga = slot(grads, *a, ta.len());
                    for ((gr, x), k) in ga.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        for (p, q) in gr.iter_mut().zip(x) {
                            *p += q * k;
                        }
                    }
                }
                if self.ng(*s) {
                    let gs = slot(grads, *s, sv.len());
                    for ((gk, grow), arow) in gs.iter_mut().zip(g.chunks(c)).zip(ta.data().chunks(c)) {
                        *gk += dot(grow, arow);
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).cols().max(1);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    let ga = slot(grads, *a, da.len());
                    for ((gr, brow), k) in ga.chunks_mut(c).zip(db.chunks(c)).zip(g) {
                        for (p, q) in gr.iter_mut().zip(brow) {
                            *p += k * q;
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, db.len());
                    for ((gr, arow), k) in gb.chunks_mut(c).zip(da.chunks(c)).zip(g) {
                        for (p, q) in gr.iter_mut().zip(arow) {
                            *p += k * q;
                        }
                    }
                }
            }
            Op::GroupGram(a, x, seg, n) => {
                let c = self.value(*a).cols().max(1);
                let (da, dx) = (self.data(*a), self.data(*x));
                let w = segment_weighted(da, g, seg, *n, c);
                if self.ng(*a) {
                    let u = segment_weighted(da, dx, seg, *n, c);
                    let ga = slot(grads, *a, da.len());
                    for (r, &s) in seg.iter().enumerate() {
                        let (us, ws) = (&u[s * c..(s + 1) * c], &w[s * c..(s + 1) * c]);
                        for ((p, uu), ww) in ga[r * c..(r + 1) * c].iter_mut().zip(us).zip(ws) {
                            *p += g[r] * uu + dx[r] * ww;
                        }
                    }
                }
                if self.ng(*x) {
                    let gx = row_dots_by_segment(da, &w, seg, c);
                    self.acc(grads, *x, gx.into_iter());
                }
            }
            Op::SoftThreshold(x, tau) => {
                let (dx, dt) = (self.data(*x), self.data(*tau));
                let active: Vec<f64> = dx.iter().zip(dt).map(|(v, t)| if v.abs() > *t { 1.0 } else { 0.0 }).collect();
                self.acc(grads, *x, g.iter().zip(&active).map(|(p, a)| p * a));
                self.acc(
                    grads,
                    *tau,
                    g.iter().zip(&active).zip(dx).map(|((p, a), v)| -p * a * sign(*v)),
                );
            }
            Op::Spmm(s, a) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let width = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    s.mul_transpose_dense_into(g, width, ga);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                self.acc(grads, *a, g.chunks(w.max(1)).flat_map(|row| row[..ca].to_vec()));
                self.acc(grads, *b, g.chunks(w.max(1)).flat_map(|row| row[ca..].to_vec()));
            }
            Op::Column(a, j) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    for (r, x) in g.iter().enumerate() {
                        ga[r * c + j] += x;
                    }
                }
            }
            Op::Pick(a, at) => {
                if self.ng(*a) {
                    let ta = self.value(*a);
                    let c = ta.cols();
                    let ga = slot(grads, *a, ta.len());
                    for (&(r, col), x) in at.iter().zip(g) {
                        ga[r * c + col] += x;
                    }
                }
            }
            Op::MaskMul(a, mask) => self.acc(grads, *a, g.iter().zip(mask.iter()).map(|(x, m)| x * m)),
            Op::ClampLog(a, floor) => {
                let da = self.data(*a);
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(da).map(|(x, v)| if *v > *floor { x / v } else { 0.0 }),
                );
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, vals: impl Iterator<Item = f64>) {
        if !self.ng(v) {
            return;
        }
        let n = self.value(v).len();
        let g = slot(grads, v, n);
        for (x, y) in g.iter_mut().zip(vals) {
            *x += y;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::MulScalar(a, b)
        | Op::RowScale(a, b)
        | Op::RowDot(a, b)
        | Op::GroupGram(a, b, ..)
        | Op::SoftThreshold(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::LayerNormRows(a)
        | Op::Sum(a)
        | Op::GatherRows(a, _)
        | Op::SegmentSum(a, _)
        | Op::Spmm(_, a)
        | Op::Column(a, _)
        | Op::Pick(a, _)
        | Op::MaskMul(a, _)
        | Op::StraightThrough(a)
        | Op::ClampLog(a, _)
        | Op::Reshape(a) => vec![*a],
    }
}

/// `u_s = Σ_{seg[r] = s} x_r a_r` for `c`-wide rows of `a`.
fn segment_weighted(a: &[f64], x: &[f64], seg: &[usize], n: usize, c: usize) -> Vec<f64> {
    let mut u = vec![0.0; n * c];
    for ((row, k), &s) in a.chunks(c).zip(x).zip(seg) {
        for (o, v) in u[s * c..(s + 1) * c].iter_mut().zip(row) {
            *o += k * v;
        }
    }
    u
}

fn row_dots_by_segment(a: &[f64], u: &[f64], seg: &[usize], c: usize) -> Vec<f64> {
    a.chunks(c).zip(seg).map(|(row, &s)| dot(row, &u[s * c..(s + 1) * c])).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, (var + LAYER_NORM_EPS).sqrt())
}
