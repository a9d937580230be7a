//! Recorded-tape reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and the inputs
//! it read. [`Tape::backward`] replays the nodes in reverse order and
//! accumulates `d loss / d node` into a fresh gradient buffer per node.

use std::sync::Arc;

use rayon::prelude::*;

use super::{dot, gemm, gemm_acc, Result, SparseMatrix, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of recorded values. `F32` rounds every primitive's
/// output to the nearest `f32`; arithmetic itself stays in `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(format!("unknown precision `{other}` (expected f64|f32)")),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Gather(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    RowSoftmax(Var),
    RowLogSumExp(Var),
    BlockDot(Var, Var, usize),
    BlockScale(Var, Var, usize),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    RowNormalize(Var, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: [usize; 2], right: [usize; 2]) -> TensorError {
    TensorError::Shape { op, left, right }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_blocks(op: &'static str, cols: usize, blocks: usize) -> Result<usize> {
    if blocks == 0 || !cols.is_multiple_of(blocks) {
        return Err(TensorError::Invalid(format!(
            "{op}: {cols} columns not divisible into {blocks} blocks"
        )));
    }
    Ok(cols / blocks)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            precision: Precision::F64,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::new()
        }
    }

    /// Turns the per-primitive non-finite check on or off (on by default in
    /// debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, mut value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if self.precision == Precision::F32 {
            value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        if self.precision == Precision::F32 {
            value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (av.shape(), bv.shape());
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(av.data(), bv.data(), out.data_mut(), m, k, n, false);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ([m, k], [n, k2]) = (av.shape(), bv.shape());
        if k != k2 {
            return Err(shape_err("matmul_t", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(av.data(), bv.data(), out.data_mut(), m, k, n, true);
        self.push("matmul_t", out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, &src) in index.iter().enumerate() {
            if src >= xv.rows() {
                return Err(TensorError::Index {
                    op: "gather",
                    index: src,
                    len: xv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        self.push("gather", out, Op::Gather(x, index), &[x])
    }

    /// Scatter-add: `out[segment[r]] += x[r]`, with `segments` output rows.
    pub fn segment_sum(&mut self, x: Var, segment: Arc<[usize]>, segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segment.len() != xv.rows() {
            return Err(shape_err("segment_sum", xv.shape(), [segment.len(), 1]));
        }
        let cols = xv.cols();
        let mut out = Tensor::zeros(segments, cols);
        for (r, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::Index {
                    op: "segment_sum",
                    index: s,
                    len: segments,
                });
            }
            for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push("segment_sum", out, Op::SegmentSum(x, segment), &[x])
    }

    /// Sparse-dense product `m * x`.
    pub fn spmm(&mut self, m: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = m.matmul_dense(self.value(x))?;
        self.push("spmm", out, Op::SpMM(m, x), &[x])
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.rows(), av.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(TensorError::LogDomain(bad));
        }
        let out = self.map(a, f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        if cols > 0 {
            out.data_mut().par_chunks_mut(cols).for_each(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            });
        }
        self.push("row_softmax", out, Op::RowSoftmax(a), &[a])
    }

    /// Max-shifted `log Σ_j exp(a[r, j])` per row, as an `n x 1` column.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(TensorError::Invalid("logsumexp over empty rows".into()));
        }
        let data: Vec<f64> = (0..av.rows())
            .into_par_iter()
            .map(|r| logsumexp(av.row(r)))
            .collect();
        let out = Tensor::new(av.rows(), 1, data)?;
        self.push("row_logsumexp", out, Op::RowLogSumExp(a), &[a])
    }

    /// Rowwise dot product, `n x 1`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.block_dot_rows(a, b, 1)
    }

    /// Rowwise dot product within each of `blocks` equal column blocks,
    /// giving an `n x blocks` result.
    pub fn block_dot_rows(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("block_dot_rows", av, bv)?;
        let width = check_blocks("block_dot_rows", av.cols(), blocks)?;
        let mut out = Tensor::zeros(av.rows(), blocks);
        for r in 0..av.rows() {
            let (ar, br) = (av.row(r), bv.row(r));
            for (h, o) in out.row_mut(r).iter_mut().enumerate() {
                let span = h * width..(h + 1) * width;
                *o = dot(&ar[span.clone()], &br[span]);
            }
        }
        self.push("block_dot_rows", out, Op::BlockDot(a, b, blocks), &[a, b])
    }

    /// `out[r, j] = x[r, j] * w[r, block(j)]` where `w` is `n x blocks`.
    pub fn block_scale_rows(&mut self, x: Var, w: Var, blocks: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let width = check_blocks("block_scale_rows", xv.cols(), blocks)?;
        if wv.shape() != [xv.rows(), blocks] {
            return Err(shape_err("block_scale_rows", xv.shape(), wv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let weights = wv.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o *= weights[j / width];
            }
        }
        self.push("block_scale_rows", out, Op::BlockScale(x, w, blocks), &[x, w])
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segment: Arc<[usize]>, segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segment.len() != xv.rows() {
            return Err(shape_err("segment_softmax", xv.shape(), [segment.len(), 1]));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= segments) {
            return Err(TensorError::Index {
                op: "segment_softmax",
                index: bad,
                len: segments,
            });
        }
        let cols = xv.cols();
        let mut max = vec![f64::NEG_INFINITY; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            for (m, v) in max[s * cols..(s + 1) * cols].iter_mut().zip(xv.row(r)) {
                *m = m.max(*v);
            }
        }
        let mut out = xv.clone();
        let mut total = vec![0.0; segments * cols];
        for (r, &s) in segment.iter().enumerate() {
            let row = out.row_mut(r);
            for c in 0..cols {
                row[c] = (row[c] - max[s * cols + c]).exp();
                total[s * cols + c] += row[c];
            }
        }
        for (r, &s) in segment.iter().enumerate() {
            let row = out.row_mut(r);
            for c in 0..cols {
                row[c] /= total[s * cols + c];
            }
        }
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(x, segment, segments),
            &[x],
        )
    }

    /// `x[r] / max(‖x[r]‖, floor)`.
    pub fn row_normalize(&mut self, x: Var, floor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        if cols > 0 {
            out.data_mut().par_chunks_mut(cols).for_each(|row| {
                let norm = dot(row, row).sqrt().max(floor);
                row.iter_mut().for_each(|v| *v /= norm);
            });
        }
        self.push("row_normalize", out, Op::RowNormalize(x, floor), &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let mean = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Tensor::scalar(mean), Op::Mean(a), &[a])
    }

    /// `Σ a²` as a scalar node.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(shape_err("backward", self.shape(loss), [1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ([m, k], [_, n]) = (av.shape(), bv.shape());
                acc(*a, &|da| gemm_acc(g.data(), false, bv.data(), true, da.data_mut(), m, n, k));
                acc(*b, &|db| gemm_acc(av.data(), true, g.data(), false, db.data_mut(), k, m, n));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ([m, k], [n, _]) = (av.shape(), bv.shape());
                acc(*a, &|da| gemm_acc(g.data(), false, bv.data(), false, da.data_mut(), m, n, k));
                acc(*b, &|db| gemm_acc(g.data(), true, av.data(), false, db.data_mut(), n, m, k));
            }
            Op::Transpose(a) => acc(*a, &|da| add_into(da.data_mut(), g.transposed().data())),
            Op::Gather(x, index) => acc(*x, &|dx| {
                for (r, &src) in index.iter().enumerate() {
                    add_into(dx.row_mut(src), g.row(r));
                }
            }),
            Op::SegmentSum(x, segment) => acc(*x, &|dx| {
                for (r, &s) in segment.iter().enumerate() {
                    add_into(dx.row_mut(r), g.row(s));
                }
            }),
            Op::SpMM(m, x) => acc(*x, &|dx| {
                let back = m.transposed().matmul_dense(g).expect("shapes checked in forward");
                add_into(dx.data_mut(), back.data());
            }),
            Op::Add(a, b) => {
                acc(*a, &|da| add_into(da.data_mut(), g.data()));
                acc(*b, &|db| add_into(db.data_mut(), g.data()));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| add_into(da.data_mut(), g.data()));
                acc(*b, &|db| {
                    db.data_mut().iter_mut().zip(g.data()).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|da| fused_add(da.data_mut(), g.data(), bv.data(), |g, o| g * o));
                acc(*b, &|db| fused_add(db.data_mut(), g.data(), av.data(), |g, o| g * o));
            }
            Op::Scale(a, f) => acc(*a, &|da| {
                da.data_mut().iter_mut().zip(g.data()).for_each(|(d, g)| *d += g * f)
            }),
            Op::Sigmoid(a) => acc(*a, &|da| {
                fused_add(da.data_mut(), g.data(), y.data(), |g, s| g * s * (1.0 - s))
            }),
            Op::Exp(a) => acc(*a, &|da| fused_add(da.data_mut(), g.data(), y.data(), |g, e| g * e)),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &|da| fused_add(da.data_mut(), g.data(), av.data(), |g, x| g / x))
            }
            Op::RowSoftmax(a) => acc(*a, &|da| {
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((d, yv), gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - inner);
                    }
                }
            }),
            Op::RowLogSumExp(a) => {
                let av = self.value(*a);
                acc(*a, &|da| {
                    let cols = av.cols();
                    da.data_mut()
                        .par_chunks_mut(cols)
                        .enumerate()
                        .for_each(|(r, drow)| {
                            let (lse, gr) = (y.get(r, 0), g.get(r, 0));
                            for (d, x) in drow.iter_mut().zip(av.row(r)) {
                                *d += gr * (x - lse).exp();
                            }
                        });
                })
            }
            Op::BlockDot(a, b, blocks) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let width = av.cols() / blocks;
                let pass = |d: &mut Tensor, other: &Tensor| {
                    for r in 0..d.rows() {
                        let (gr, orow) = (g.row(r), other.row(r));
                        for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv += gr[j / width] * orow[j];
                        }
                    }
                };
                acc(*a, &|da| pass(da, bv));
                acc(*b, &|db| pass(db, av));
            }
            Op::BlockScale(x, w, blocks) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let width = xv.cols() / blocks;
                acc(*x, &|dx| {
                    for r in 0..xv.rows() {
                        let (gr, wr) = (g.row(r), wv.row(r));
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d += gr[j] * wr[j / width];
                        }
                    }
                });
                acc(*w, &|dw| {
                    for r in 0..xv.rows() {
                        let (gr, xr) = (g.row(r), xv.row(r));
                        for (h, d) in dw.row_mut(r).iter_mut().enumerate() {
                            let span = h * width..(h + 1) * width;
                            *d += dot(&gr[span.clone()], &xr[span]);
                        }
                    }
                });
            }
            Op::SegmentSoftmax(x, segment, segments) => acc(*x, &|dx| {
                let cols = y.cols();
                let mut inner = vec![0.0; segments * cols];
                for (r, &s) in segment.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    for c in 0..cols {
                        inner[s * cols + c] += yr[c] * gr[c];
                    }
                }
                for (r, &s) in segment.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d += yr[c] * (gr[c] - inner[s * cols + c]);
                    }
                }
            }),
            Op::RowNormalize(x, floor) => {
                let xv = self.value(*x);
                acc(*x, &|dx| {
                    let cols = xv.cols();
                    dx.data_mut()
                        .par_chunks_mut(cols)
                        .enumerate()
                        .for_each(|(r, drow)| {
                            let (xr, yr, gr) = (xv.row(r), y.row(r), g.row(r));
                            let norm = dot(xr, xr).sqrt();
                            if norm > *floor {
                                let inner = dot(yr, gr);
                                for ((d, yv), gv) in drow.iter_mut().zip(yr).zip(gr) {
                                    *d += (gv - yv * inner) / norm;
                                }
                            } else {
                                for (d, gv) in drow.iter_mut().zip(gr) {
                                    *d += gv / floor;
                                }
                            }
                        });
                })
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, &|da| da.data_mut().iter_mut().for_each(|d| *d += gv))
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                acc(*a, &|da| da.data_mut().iter_mut().for_each(|d| *d += gv))
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn fused_add(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    dst.iter_mut()
        .zip(g.iter().zip(other))
        .for_each(|(d, (g, o))| *d += f(*g, *o));
}

/// Max-shifted log-sum-exp of a slice.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradient buffers produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros of the node's shape.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = tape.shape(v);
            Tensor::zeros(r, c)
        })
    }
}
