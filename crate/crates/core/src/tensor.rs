//! Dense 2-D tensors on a reverse-mode gradient tape, plus Adam.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops return
//! [`Var`] handles; [`Tape::backward`] walks the tape in reverse once and
//! returns a [`Gradients`] table. Trainable weights live in a [`ParamStore`]
//! and enter a tape through [`Tape::param`].

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `a (n x k) * b (k x m)`
fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (n x m) * b^T` where `b` is `k x m`.
fn matmul_nt(g: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, k) = (g.rows, g.cols, b.rows);
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b.data[p * m..(p + 1) * m];
            out.data[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` where `a` is `n x k` and `g` is `n x m`.
fn matmul_tn(a: &Matrix, g: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows, a.cols, g.cols);
    let mut out = Matrix::zeros(k, m);
    for i in 0..n {
        let grow = &g.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op}: index {index} out of range for {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: mask selects no entries")]
    EmptyMask { op: &'static str },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, used for fault injection in gradient-check negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    AddRow,
    ScaleAdd,
    AddScalar,
    Relu,
    ConcatCols,
    Gather,
    SegmentSum,
    ScaleRows,
    MulConst,
    Sum,
    L1Loss,
    BceWithLogits,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    ScaleAdd(Var, Var, Var),
    AddScalar(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    ScaleRows(Var, Rc<[f64]>),
    MulConst(Var, Rc<Matrix>),
    Sum(Var),
    L1Loss(Var, Rc<Matrix>),
    BceWithLogits(Var, Rc<Matrix>, Rc<Matrix>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::ScaleAdd(..) => OpKind::ScaleAdd,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Gather(..) => OpKind::Gather,
            Op::SegmentSum(..) => OpKind::SegmentSum,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Sum(..) => OpKind::Sum,
            Op::L1Loss(..) => OpKind::L1Loss,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    fault: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to every tape node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients, summed over every time the parameter was
    /// loaded onto the tape. `None` for parameters the loss did not touch.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<Matrix>> {
        let mut out: Vec<Option<Matrix>> = vec![None; store.len()];
        for &(pid, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                match &mut out[pid.0] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` wrong (gradient scaled by 1.5).
    /// Only meant for negative controls of the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatCols(a, b) => self.rg(*a) || self.rg(*b),
            Op::ScaleAdd(a, s, b) => self.rg(*a) || self.rg(*s) || self.rg(*b),
            Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Gather(a, _)
            | Op::SegmentSum(a, _)
            | Op::ScaleRows(a, _)
            | Op::MulConst(a, _)
            | Op::Sum(a)
            | Op::L1Loss(a, _)
            | Op::BceWithLogits(a, _, _) => self.rg(*a),
        };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Matrix) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "variable")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.variable(store.values[id.0].clone())?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(TensorError::Shape { op: "matmul", left: av.shape(), right: bv.shape() });
        }
        let out = matmul_nn(av, bv);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::Shape { op: "add", left: av.shape(), right: bv.shape() });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(TensorError::Shape { op: "add_row", left: av.shape(), right: rv.shape() });
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// `a + s * b` with `s` a `1 x 1` tensor.
    pub fn scale_add(&mut self, a: Var, s: Var, b: Var) -> Result<Var> {
        let (av, sv, bv) = (self.value(a), self.value(s), self.value(b));
        if sv.shape() != (1, 1) {
            return Err(TensorError::Shape { op: "scale_add", left: (1, 1), right: sv.shape() });
        }
        if av.shape() != bv.shape() {
            return Err(TensorError::Shape { op: "scale_add", left: av.shape(), right: bv.shape() });
        }
        let s0 = sv.data[0];
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + s0 * y).collect();
        let out = Matrix { rows: av.rows, cols: av.cols, data };
        self.push(out, Op::ScaleAdd(a, s, b), "scale_add")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x += c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows {
            return Err(TensorError::Shape { op: "concat_cols", left: av.shape(), right: bv.shape() });
        }
        let mut out = Matrix::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows) {
            return Err(TensorError::Index { op: "gather", index: bad, bound: tv.rows });
        }
        let mut out = Matrix::zeros(ids.len(), tv.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::Gather(table, ids.into()), "gather")
    }

    /// Embedding lookup; same as [`Tape::gather`].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Row `s` of the output is the sum of the rows of `values` whose id is `s`.
    ///
    /// Rows of a segment are added in lexicographic order of their values, so
    /// the result depends only on the multiset of rows and not on their order.
    pub fn segment_sum(&mut self, values: Var, ids: &[usize], num_segments: usize) -> Result<Var> {
        let vv = self.value(values);
        if ids.len() != vv.rows {
            return Err(TensorError::Shape { op: "segment_sum", left: vv.shape(), right: (ids.len(), 1) });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= num_segments) {
            return Err(TensorError::Index { op: "segment_sum", index: bad, bound: num_segments });
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_segments];
        for (r, &s) in ids.iter().enumerate() {
            members[s].push(r);
        }
        let mut out = Matrix::zeros(num_segments, vv.cols);
        for (s, rows) in members.iter_mut().enumerate() {
            if rows.len() > 1 {
                rows.sort_by(|&x, &y| {
                    vv.row(x)
                        .iter()
                        .zip(vv.row(y))
                        .map(|(a, b)| a.total_cmp(b))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
            }
            let orow = &mut out.data[s * vv.cols..(s + 1) * vv.cols];
            for &r in rows.iter() {
                for (o, x) in orow.iter_mut().zip(vv.row(r)) {
                    *o += x;
                }
            }
        }
        self.push(out, Op::SegmentSum(values, ids.into()), "segment_sum")
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if factors.len() != av.rows {
            return Err(TensorError::Shape { op: "scale_rows", left: av.shape(), right: (factors.len(), 1) });
        }
        let mut out = av.clone();
        for (r, f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        self.push(out, Op::ScaleRows(a, factors.into()), "scale_rows")
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(TensorError::Shape { op: "mul_const", left: av.shape(), right: mask.shape() });
        }
        let data = av.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
        let out = Matrix { rows: av.rows, cols: av.cols, data };
        self.push(out, Op::MulConst(a, Rc::new(mask)), "mul_const")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(total), Op::Sum(a), "sum")
    }

    /// Mean absolute error over entries where `mask` is nonzero (all entries
    /// when `mask` is `None`).
    pub fn l1_loss(&mut self, pred: Var, target: &Matrix, mask: Option<&Matrix>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(TensorError::Shape { op: "l1_loss", left: pv.shape(), right: target.shape() });
        }
        let weights = loss_weights("l1_loss", pv.shape(), mask)?;
        let loss: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .zip(&weights.data)
            .map(|((p, t), w)| w * (p - t).abs())
            .sum();
        let out = Matrix::scalar(loss);
        let op = Op::L1Loss(pred, Rc::new(pack_target(target, &weights)));
        self.push(out, op, "l1_loss")
    }

    /// Masked mean binary cross-entropy on logits, using
    /// `max(x, 0) - x * y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Matrix, mask: Option<&Matrix>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(TensorError::Shape { op: "bce_with_logits", left: lv.shape(), right: target.shape() });
        }
        let weights = loss_weights("bce_with_logits", lv.shape(), mask)?;
        let loss: f64 = lv
            .data
            .iter()
            .zip(&target.data)
            .zip(&weights.data)
            .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let op = Op::BceWithLogits(logits, Rc::new(target.clone()), Rc::new(weights));
        self.push(Matrix::scalar(loss), op, "bce_with_logits")
    }

    /// Reverse pass from a `1 x 1` loss. A tape supports exactly one call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.fault.is_some() && self.fault == node.op.kind() {
                g.data.iter_mut().for_each(|x| *x *= 1.5);
            }
            let acc = |grads: &mut Vec<Option<Matrix>>, v: Var, contrib: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(&mut grads, *a, matmul_nt(&g, bv));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, matmul_tn(av, &g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in rg.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, rg);
                    acc(&mut grads, *a, g.clone());
                }
                Op::ScaleAdd(a, s, b) => {
                    let s0 = self.value(*s).data[0];
                    let bv = self.value(*b);
                    let ds: f64 = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, Matrix::scalar(ds));
                    let mut db = g.clone();
                    db.data.iter_mut().for_each(|x| *x *= s0);
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut d = g.clone();
                    for (x, &inp) in d.data.iter_mut().zip(&av.data) {
                        if inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut da = Matrix::zeros(g.rows, ac);
                    let mut db = Matrix::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let mut d = Matrix::zeros(tv.rows, tv.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::SegmentSum(values, ids) => {
                    let vv = self.value(*values);
                    let mut d = Matrix::zeros(vv.rows, vv.cols);
                    for (r, &s) in ids.iter().enumerate() {
                        d.row_mut(r).copy_from_slice(g.row(s));
                    }
                    acc(&mut grads, *values, d);
                }
                Op::ScaleRows(a, factors) => {
                    let mut d = g.clone();
                    for (r, f) in factors.iter().enumerate() {
                        d.row_mut(r).iter_mut().for_each(|x| *x *= f);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MulConst(a, mask) => {
                    let mut d = g.clone();
                    for (x, m) in d.data.iter_mut().zip(&mask.data) {
                        *x *= m;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data[0]));
                }
                Op::L1Loss(pred, packed) => {
                    let pv = self.value(*pred);
                    let n = pv.data.len();
                    let (target, weights) = packed.data.split_at(n);
                    let data = pv
                        .data
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((p, t), w)| g.data[0] * w * sign(p - t))
                        .collect();
                    acc(&mut grads, *pred, Matrix { rows: pv.rows, cols: pv.cols, data });
                }
                Op::BceWithLogits(logits, target, weights) => {
                    let lv = self.value(*logits);
                    let data = lv
                        .data
                        .iter()
                        .zip(&target.data)
                        .zip(&weights.data)
                        .map(|((&x, &y), &w)| g.data[0] * w * (sigmoid(x) - y))
                        .collect();
                    acc(&mut grads, *logits, Matrix { rows: lv.rows, cols: lv.cols, data });
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

/// Per-entry weights `mask / count(mask)`.
fn loss_weights(op: &'static str, shape: (usize, usize), mask: Option<&Matrix>) -> Result<Matrix> {
    let mut w = match mask {
        Some(m) if m.shape() != shape => return Err(TensorError::Shape { op, left: shape, right: m.shape() }),
        Some(m) => Matrix { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&x| (x != 0.0) as u8 as f64).collect() },
        None => Matrix::filled(shape.0, shape.1, 1.0),
    };
    let count: f64 = w.data.iter().sum();
    if count == 0.0 {
        return Err(TensorError::EmptyMask { op });
    }
    w.data.iter_mut().for_each(|x| *x /= count);
    Ok(w)
}

fn pack_target(target: &Matrix, weights: &Matrix) -> Matrix {
    let mut data = target.data.clone();
    data.extend_from_slice(&weights.data);
    Matrix { rows: 1, cols: data.len(), data }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

pub const CHECKPOINT_FORMAT: &str = "himp-params/1";

#[derive(Serialize, Deserialize)]
struct StoredParam {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    format: String,
    params: BTreeMap<String, StoredParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let params = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, m)| (n.clone(), StoredParam { rows: m.rows, cols: m.cols, values: m.data.clone() }))
            .collect();
        serde_json::to_value(StoredParams { format: CHECKPOINT_FORMAT.to_string(), params })
            .expect("params serialize")
    }

    /// Overwrites values from a checkpoint. Every stored name must exist here
    /// with the same shape, and every parameter here must be stored.
    pub fn load_json_value(&mut self, value: &serde_json::Value) -> Result<()> {
        let stored: StoredParams =
            serde_json::from_value(value.clone()).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(TensorError::Checkpoint(format!("unsupported format tag {:?}", stored.format)));
        }
        if stored.params.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.params.len(),
                self.len()
            )));
        }
        for (name, p) in stored.params {
            let id = self.id(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let current = self.values[id.0].shape();
            if current != (p.rows, p.cols) || p.values.len() != p.rows * p.cols {
                return Err(TensorError::Checkpoint(format!(
                    "{name}: stored shape ({}, {}) does not match {:?}",
                    p.rows, p.cols, current
                )));
            }
            self.values[id.0] = Matrix { rows: p.rows, cols: p.cols, data: p.values };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and consumes the gradients. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: Vec<Option<Matrix>>) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.into_iter().enumerate() {
            let (m, v, w) = (&mut self.first[i], &mut self.second[i], &mut params.values[i]);
            let g = g.unwrap_or_else(|| Matrix::zeros(w.rows, w.cols));
            for k in 0..w.data.len() {
                let gk = g.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mhat = m.data[k] / c1;
                let vhat = v.data[k] / c2;
                w.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        if params.values.iter().any(|w| !w.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}
