//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops are
//! appended in execution order, so the node list is topologically sorted by
//! construction and [`Tape::backward`] walks it once in reverse.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a vector over the last axis, repeated for every row.
    Row,
    /// rhs holds a single element.
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    DivEps(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Transpose(Var),
    Binary(Binary, Var, Var, Bcast),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    SegmentSoftmax { scores: Var, targets: Rc<[usize]>, n_nodes: usize },
    SegmentWeightedSum { weights: Var, values: Var, targets: Rc<[usize]> },
    BlockSum(Var, usize),
    RepeatCols(Var, usize),
    FoldCols(Var, usize),
    SumRows(Var),
    Reshape(Var),
    Sum(Var),
    EdgeScores { x_l: Var, x_r: Var, a: Var, sources: Rc<[usize]>, targets: Rc<[usize]>, heads: usize, slope: f64 },
    EdgeAggregate { weights: Var, values: Var, sources: Rc<[usize]>, targets: Rc<[usize]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of differentiable ops.
///
/// Each tape is single-threaded; independent tapes can run concurrently.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Linear(..) => "linear",
        Op::Transpose(_) => "transpose",
        Op::Binary(Binary::Add, ..) => "add",
        Op::Binary(Binary::Sub, ..) => "sub",
        Op::Binary(Binary::Mul, ..) => "mul",
        Op::Binary(Binary::DivEps(_), ..) => "div_eps",
        Op::Scale(..) => "scale",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::SegmentSoftmax { .. } => "segment_softmax",
        Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
        Op::BlockSum(..) => "block_sum",
        Op::RepeatCols(..) => "repeat_cols",
        Op::FoldCols(..) => "fold_cols",
        Op::SumRows(_) => "sum_rows",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::EdgeScores { .. } => "edge_scores",
        Op::EdgeAggregate { .. } => "edge_aggregate",
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly at both ends.
#[inline]
fn fast_tanh<T: Scalar>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

/// Derivative of [`gelu`] at `x`, given its output `y`.
#[inline]
fn gelu_grad<T: Scalar>(x: T, y: T) -> T {
    let half = T::lit(0.5);
    if x == T::zero() {
        return half;
    }
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (T::lit(2.0) * y / x - T::one()).max(-T::one()).min(T::one());
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Denominator used by `div_eps`: `y + eps * sign(y)` with `sign(0) = +1`, so
/// the guard always pushes away from zero.
#[inline]
fn guarded<T: Scalar>(y: T, eps: T) -> T {
    if y < T::zero() {
        y - eps
    } else {
        y + eps
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0 }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every op recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Records a leaf. Gradients flow into it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        let value = Tensor { grad: None, ..tensor };
        self.push_raw(value, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} produced a non-finite value at flat index {pos}", op_name(&op))));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Tensor::from_parts_unchecked(shape, data), op, needs_grad))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Index(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.check(v)?;
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(format!("{what} expects a 2-D tensor, got shape {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [n, k] * b [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(MatRef::new(self.value(a).data(), n, k), MatRef::new(self.value(b).data(), k, m), T::zero(), &mut out);
        self.macs += (n * k * m) as u64;
        self.push(vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x [n, d_in] * w [d_in, d_out] + b [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims2(x, "linear")?;
        let (k2, m) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(Error::dim(format!("linear: input width {k} does not match weight rows {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        let mut beta = T::zero();
        if let Some(b) = b {
            self.check(b)?;
            let bv = self.value(b);
            if bv.numel() != m || bv.shape().len() != 1 {
                return Err(Error::dim(format!("linear: bias shape {:?} does not match output width {m}", bv.shape())));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        gemm(MatRef::new(self.value(x).data(), n, k), MatRef::new(self.value(w).data(), k, m), beta, &mut out);
        self.macs += (n * k * m) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(vec![n, m], out, Op::Linear(x, w, b), &inputs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        self.push(vec![m, n], out, Op::Transpose(a), &[a])
    }

    // ---------------------------------------------------------------- elementwise

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let nb = self.value(b).numel();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        let last = sa.last().copied().unwrap_or(1);
        let rhs_is_row = match sb.len() {
            1 => sb[0] == last,
            2 => sb[0] == 1 && sb[1] == last,
            _ => false,
        };
        if !sa.is_empty() && rhs_is_row {
            return Ok(Bcast::Row);
        }
        Err(Error::dim(format!("shapes {sa:?} and {sb:?} are not broadcast-compatible")))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols().max(1);
        let eps = match kind {
            Binary::DivEps(e) => T::lit(e),
            _ => T::zero(),
        };
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::DivEps(_) => x / guarded(y, eps),
        };
        let out: Vec<T> = match mode {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => av.data().chunks_exact(cols).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect(),
        };
        let shape = av.shape().to_vec();
        if matches!(kind, Binary::Mul | Binary::DivEps(_)) {
            self.macs += out.len() as u64;
        }
        self.push(shape, out, Op::Binary(kind, a, b, mode), &[a, b])
    }

    /// Elementwise sum; `b` may be the same shape, a row vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a / (b + eps)` elementwise, with the guard applied away from zero for
    /// negative denominators.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::arg(format!("div_eps requires eps > 0, got {eps}")));
        }
        self.binary(Binary::DivEps(eps), a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let c = T::lit(factor);
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * c).collect();
        let shape = av.shape().to_vec();
        self.push(shape, out, Op::Scale(a, factor), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.check(a)?;
        let s = T::lit(slope);
        let av = self.value(a);
        let out = av.data().iter().map(|&x| if x > T::zero() { x } else { x * s }).collect();
        let shape = av.shape().to_vec();
        self.push(shape, out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| gelu(x)).collect();
        let shape = av.shape().to_vec();
        self.macs += out.len() as u64;
        self.push(shape, out, Op::Gelu(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let d = xv.cols();
        if xv.shape().is_empty() || d == 0 {
            return Err(Error::dim("layer_norm needs a non-empty last axis"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != d || b.len() != d {
            return Err(Error::dim(format!("layer_norm affine widths {}/{} do not match {d}", g.len(), b.len())));
        }
        let rows = xv.numel() / d;
        let inv_d = 1.0 / d as f64;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().map(|v| v.to_f64_lossless()).sum::<f64>() * inv_d;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64_lossless() - mean;
                    c * c
                })
                .sum::<f64>()
                * inv_d;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v.to_f64_lossless() - mean) * r;
                xhat.push(h);
                out.push(g[j] * T::lit(h) + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        self.macs += 2 * (rows * d) as u64;
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    // ---------------------------------------------------------------- structure

    /// Stacks 2-D tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat_rows of nothing"));
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows widths {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins 2-D tensors with equal height along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat_cols of nothing"));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols heights {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Selects rows `index[e]` of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let (n, d) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("gather_rows index {bad} >= {n}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let e = index.len();
        self.push(vec![e, d], out, Op::GatherRows(a, index), &[a])
    }

    /// Softmax of `scores` within each group of entries sharing a target.
    ///
    /// `scores` is `[E]` or `[E, H]`; with `H` columns every column is
    /// normalized independently. Reductions run in edge-list order.
    pub fn segment_softmax(&mut self, scores: Var, targets: Rc<[usize]>, n_nodes: usize) -> Result<Var> {
        self.check(scores)?;
        let sv = self.value(scores);
        let (e, h) = edge_extents(sv.shape(), "segment_softmax")?;
        if e == 0 {
            return Err(Error::arg("segment_softmax needs at least one entry"));
        }
        if targets.len() != e {
            return Err(Error::dim(format!("{} targets for {e} scores", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_nodes) {
            return Err(Error::Index(format!("segment target {bad} >= {n_nodes}")));
        }
        let s = sv.data();
        let mut max = vec![T::neg_infinity(); n_nodes * h];
        for (k, &t) in targets.iter().enumerate() {
            for c in 0..h {
                let m = &mut max[t * h + c];
                *m = m.max(s[k * h + c]);
            }
        }
        let mut out = vec![T::zero(); e * h];
        let mut denom = vec![T::zero(); n_nodes * h];
        for (k, &t) in targets.iter().enumerate() {
            for c in 0..h {
                let v = (s[k * h + c] - max[t * h + c]).exp();
                out[k * h + c] = v;
                denom[t * h + c] += v;
            }
        }
        for (k, &t) in targets.iter().enumerate() {
            for c in 0..h {
                out[k * h + c] /= denom[t * h + c];
            }
        }
        let shape = sv.shape().to_vec();
        self.macs += (e * h) as u64;
        self.push(shape, out, Op::SegmentSoftmax { scores, targets, n_nodes }, &[scores])
    }

    /// `out[i] = sum over edges e with target i of weights[e] * values[e]`.
    ///
    /// `weights` is `[E]` or `[E, H]`. With `H` heads, `values` is `[E, D]`
    /// with `D` divisible by `H`, and weight column `h` scales the `h`-th
    /// contiguous block of `D / H` channels. Targets without edges get zeros.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, targets: Rc<[usize]>, n_nodes: usize) -> Result<Var> {
        self.check(weights)?;
        let (e, h) = edge_extents(self.shape(weights), "segment_weighted_sum")?;
        let (ev, d) = self.dims2(values, "segment_weighted_sum")?;
        if ev != e || targets.len() != e {
            return Err(Error::dim(format!("segment_weighted_sum: {e} weights, {ev} value rows, {} targets", targets.len())));
        }
        if d % h != 0 {
            return Err(Error::dim(format!("value width {d} not divisible by {h} heads")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_nodes) {
            return Err(Error::Index(format!("segment target {bad} >= {n_nodes}")));
        }
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let dk = d / h;
        let mut out = vec![T::zero(); n_nodes * d];
        for (k, &t) in targets.iter().enumerate() {
            let dst = &mut out[t * d..(t + 1) * d];
            let src = &v[k * d..(k + 1) * d];
            for head in 0..h {
                let wk = w[k * h + head];
                let r = head * dk..(head + 1) * dk;
                for (o, &x) in dst[r.clone()].iter_mut().zip(&src[r]) {
                    *o += wk * x;
                }
            }
        }
        self.macs += (e * d) as u64;
        self.push(vec![n_nodes, d], out, Op::SegmentWeightedSum { weights, values, targets }, &[weights, values])
    }

    /// Sums each contiguous block of `width / heads` columns: `[E, D] -> [E, H]`.
    pub fn block_sum(&mut self, a: Var, heads: usize) -> Result<Var> {
        let (e, d) = self.dims2(a, "block_sum")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("block_sum: width {d} not divisible by {heads}")));
        }
        let dk = d / heads;
        let out: Vec<T> = self.value(a).data().chunks_exact(dk).map(|c| c.iter().copied().sum()).collect();
        self.macs += (e * d) as u64;
        self.push(vec![e, heads], out, Op::BlockSum(a, heads), &[a])
    }

    /// Tiles a `[r, c]` tensor `times` times horizontally: `[r, times * c]`.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "repeat_cols")?;
        if times == 0 {
            return Err(Error::arg("repeat_cols needs times >= 1"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * c * times);
        for row in src.chunks_exact(c.max(1)).take(r) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        self.push(vec![r, c * times], out, Op::RepeatCols(a, times), &[a])
    }

    /// Sums the `times` horizontal blocks of a `[r, times * c]` tensor.
    pub fn fold_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, w) = self.dims2(a, "fold_cols")?;
        if times == 0 || w % times != 0 {
            return Err(Error::dim(format!("fold_cols: width {w} not divisible by {times}")));
        }
        let c = w / times;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for b in 0..times {
                let blk = &src[i * w + b * c..i * w + (b + 1) * c];
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(blk) {
                    *o += x;
                }
            }
        }
        self.push(vec![r, c], out, Op::FoldCols(a, times), &[a])
    }

    /// Fused GATv2 edge scores: for edge `e = (s -> t)` and head `h`,
    /// `out[e, h] = sum over c in block h of a[c] * LeakyReLU(x_l[s, c] + x_r[t, c])`.
    ///
    /// Equivalent to gathering both endpoint rows, adding, applying the
    /// activation, scaling by `a` and summing per head block, without
    /// materializing the `[E, d]` intermediates.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_scores(
        &mut self,
        x_l: Var,
        x_r: Var,
        a: Var,
        sources: Rc<[usize]>,
        targets: Rc<[usize]>,
        heads: usize,
        slope: f64,
    ) -> Result<Var> {
        let (n, d) = self.dims2(x_l, "edge_scores")?;
        if self.dims2(x_r, "edge_scores")? != (n, d) {
            return Err(Error::dim(format!("edge_scores: x_r {:?} vs x_l {:?}", self.shape(x_r), self.shape(x_l))));
        }
        self.check(a)?;
        if self.shape(a) != [d] {
            return Err(Error::dim(format!("edge_scores: attention vector {:?} for width {d}", self.shape(a))));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("edge_scores: width {d} not divisible by {heads} heads")));
        }
        check_edges(&sources, &targets, n)?;
        let (xl, xr, av) = (self.value(x_l).data(), self.value(x_r).data(), self.value(a).data());
        let s = T::lit(slope);
        let dk = d / heads;
        let e = sources.len();
        let mut out = Vec::with_capacity(e * heads);
        for (&src, &dst) in sources.iter().zip(targets.iter()) {
            let l = &xl[src * d..(src + 1) * d];
            let r = &xr[dst * d..(dst + 1) * d];
            for h in 0..heads {
                let mut acc = T::zero();
                for c in h * dk..(h + 1) * dk {
                    let z = l[c] + r[c];
                    acc += av[c] * if z > T::zero() { z } else { z * s };
                }
                out.push(acc);
            }
        }
        self.macs += (e * d) as u64;
        self.push(vec![e, heads], out, Op::EdgeScores { x_l, x_r, a, sources, targets, heads, slope }, &[x_l, x_r, a])
    }

    /// `out[t] = sum over edges e = (s -> t) of weights[e] * values[s]`, with
    /// per-head weights `[E, H]` scaling contiguous channel blocks. Same as
    /// `segment_weighted_sum` applied to `gather_rows(values, sources)`.
    pub fn edge_aggregate(&mut self, weights: Var, values: Var, sources: Rc<[usize]>, targets: Rc<[usize]>) -> Result<Var> {
        self.check(weights)?;
        let (e, h) = edge_extents(self.shape(weights), "edge_aggregate")?;
        let (n, d) = self.dims2(values, "edge_aggregate")?;
        if sources.len() != e {
            return Err(Error::dim(format!("edge_aggregate: {e} weights for {} edges", sources.len())));
        }
        if d % h != 0 {
            return Err(Error::dim(format!("value width {d} not divisible by {h} heads")));
        }
        check_edges(&sources, &targets, n)?;
        let (w, v) = (self.value(weights).data(), self.value(values).data());
        let dk = d / h;
        let mut out = vec![T::zero(); n * d];
        for (k, (&src, &dst)) in sources.iter().zip(targets.iter()).enumerate() {
            let from = &v[src * d..(src + 1) * d];
            let to = &mut out[dst * d..(dst + 1) * d];
            for head in 0..h {
                let wk = w[k * h + head];
                for c in head * dk..(head + 1) * dk {
                    to[c] += wk * from[c];
                }
            }
        }
        self.macs += (e * d) as u64;
        self.push(vec![n, d], out, Op::EdgeAggregate { weights, values, sources, targets }, &[weights, values])
    }

    /// Column sums of a 2-D tensor: `[n, d] -> [d]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims2(a, "sum_rows")?;
        let mut out = vec![T::zero(); d];
        for row in self.value(a).data().chunks_exact(d.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push(vec![d], out, Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", av.shape())));
        }
        let data = av.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------------- backward

    /// Propagates `d loss / d node` to every differentiable leaf, adding into
    /// the leaves' gradient slots. Calling it twice accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let gm = MatRef::new(g, n, m);
                if self.wants(*a) {
                    let dst = slot(adj, *a, n * k);
                    gemm(gm, MatRef::new(self.value(*b).data(), k, m).t(), T::one(), dst);
                }
                if self.wants(*b) {
                    let dst = slot(adj, *b, k * m);
                    gemm(MatRef::new(self.value(*a).data(), n, k).t(), gm, T::one(), dst);
                }
            }
            Op::Linear(x, w, b) => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[1];
                let gm = MatRef::new(g, n, m);
                if self.wants(*x) {
                    let dst = slot(adj, *x, n * k);
                    gemm(gm, MatRef::new(self.value(*w).data(), k, m).t(), T::one(), dst);
                }
                if self.wants(*w) {
                    let dst = slot(adj, *w, k * m);
                    gemm(MatRef::new(self.value(*x).data(), n, k).t(), gm, T::one(), dst);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let dst = slot(adj, *b, m);
                        for row in g.chunks_exact(m) {
                            for (d, &v) in dst.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = slot(adj, *a, n * m);
                    for i in 0..n {
                        for j in 0..m {
                            dst[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b, mode) => self.backprop_binary(*kind, *a, *b, *mode, g, adj),
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let c = T::lit(*f);
                    let dst = slot(adj, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let s = T::lit(*slope);
                    let x = self.value(*a).data();
                    let dst = slot(adj, *a, g.len());
                    for ((d, &v), &xv) in dst.iter_mut().zip(g).zip(x) {
                        *d += if xv > T::zero() { v } else { v * s };
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let y = out.data();
                    let dst = slot(adj, *a, g.len());
                    for (((d, &v), &xv), &yv) in dst.iter_mut().zip(g).zip(x).zip(y) {
                        *d += v * gelu_grad(xv, yv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let dst = slot(adj, *gamma, d);
                    for (row, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dst[j] += row[j] * T::lit(xh[j]);
                        }
                    }
                }
                if self.wants(*beta) {
                    let dst = slot(adj, *beta, d);
                    for row in g.chunks_exact(d) {
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let dst = slot(adj, *x, g.len());
                    let inv_d = 1.0 / d as f64;
                    let mut dxhat = vec![0.0f64; d];
                    for (r, (row, xh)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let v = row[j].to_f64_lossless() * gam[j].to_f64_lossless();
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xh[j];
                        }
                        let rs = rstd[r];
                        for j in 0..d {
                            let dx = rs * (dxhat[j] - inv_d * s1 - xh[j] * inv_d * s2);
                            dst[r * d + j] += T::lit(dx);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let dst = slot(adj, p, len);
                        dst.iter_mut().zip(&g[off..off + len]).for_each(|(d, &v)| *d += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut col0 = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let dst = slot(adj, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += g[r * total + col0 + c];
                            }
                        }
                    }
                    col0 += w;
                }
            }
            Op::GatherRows(a, index) => {
                if self.wants(*a) {
                    let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = slot(adj, *a, n * d);
                    for (k, &src) in index.iter().enumerate() {
                        for (o, &v) in dst[src * d..(src + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentSoftmax { scores, targets, n_nodes } => {
                if self.wants(*scores) {
                    let h = out.cols();
                    let h = if out.shape().len() == 1 { 1 } else { h };
                    let alpha = out.data();
                    let mut dot = vec![T::zero(); n_nodes * h];
                    for (k, &t) in targets.iter().enumerate() {
                        for c in 0..h {
                            dot[t * h + c] += alpha[k * h + c] * g[k * h + c];
                        }
                    }
                    let dst = slot(adj, *scores, alpha.len());
                    for (k, &t) in targets.iter().enumerate() {
                        for c in 0..h {
                            let idx = k * h + c;
                            dst[idx] += alpha[idx] * (g[idx] - dot[t * h + c]);
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { weights, values, targets } => {
                let wv = self.value(*weights);
                let h = if wv.shape().len() == 1 { 1 } else { wv.cols() };
                let d = self.shape(*values)[1];
                let dk = d / h;
                let w = wv.data();
                let v = self.value(*values).data();
                if self.wants(*weights) {
                    let dst = slot(adj, *weights, w.len());
                    for (k, &t) in targets.iter().enumerate() {
                        for head in 0..h {
                            let r = head * dk..(head + 1) * dk;
                            let s: T = v[k * d..(k + 1) * d][r.clone()].iter().zip(&g[t * d..(t + 1) * d][r]).map(|(&a, &b)| a * b).sum();
                            dst[k * h + head] += s;
                        }
                    }
                }
                if self.wants(*values) {
                    let dst = slot(adj, *values, v.len());
                    for (k, &t) in targets.iter().enumerate() {
                        for head in 0..h {
                            let wk = w[k * h + head];
                            let r = head * dk..(head + 1) * dk;
                            for (o, &gv) in dst[k * d..(k + 1) * d][r.clone()].iter_mut().zip(&g[t * d..(t + 1) * d][r]) {
                                *o += wk * gv;
                            }
                        }
                    }
                }
            }
            Op::BlockSum(a, heads) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let dk = self.shape(*a)[1] / heads;
                    let dst = slot(adj, *a, n);
                    for (blk, &v) in dst.chunks_exact_mut(dk).zip(g) {
                        blk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::RepeatCols(a, times) => {
                if self.wants(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = slot(adj, *a, r * c);
                    let w = c * times;
                    for i in 0..r {
                        for b in 0..*times {
                            for j in 0..c {
                                dst[i * c + j] += g[i * w + b * c + j];
                            }
                        }
                    }
                }
            }
            Op::FoldCols(a, times) => {
                if self.wants(*a) {
                    let (r, w) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let c = w / times;
                    let dst = slot(adj, *a, r * w);
                    for i in 0..r {
                        for b in 0..*times {
                            for j in 0..c {
                                dst[i * w + b * c + j] += g[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::SumRows(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let d = g.len();
                    let dst = slot(adj, *a, n);
                    for row in dst.chunks_exact_mut(d.max(1)) {
                        row.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let dst = slot(adj, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::EdgeScores { x_l, x_r, a, sources, targets, heads, slope } => {
                let d = self.shape(*x_l)[1];
                let n = self.shape(*x_l)[0];
                let dk = d / heads;
                let s = T::lit(*slope);
                let (xl, xr, av) = (self.value(*x_l).data(), self.value(*x_r).data(), self.value(*a).data());
                let (wl, wr, wa) = (self.wants(*x_l), self.wants(*x_r), self.wants(*a));
                let mut dl = if wl { vec![T::zero(); n * d] } else { Vec::new() };
                let mut dr = if wr { vec![T::zero(); n * d] } else { Vec::new() };
                let mut da = vec![T::zero(); d];
                for (k, (&src, &dst)) in sources.iter().zip(targets.iter()).enumerate() {
                    for h in 0..*heads {
                        let gk = g[k * heads + h];
                        for c in h * dk..(h + 1) * dk {
                            let z = xl[src * d + c] + xr[dst * d + c];
                            let (act, slope_c) = if z > T::zero() { (z, T::one()) } else { (z * s, s) };
                            if wa {
                                da[c] += gk * act;
                            }
                            let dz = gk * av[c] * slope_c;
                            if wl {
                                dl[src * d + c] += dz;
                            }
                            if wr {
                                dr[dst * d + c] += dz;
                            }
                        }
                    }
                }
                for (v, buf, want) in [(*x_l, dl, wl), (*x_r, dr, wr), (*a, da, wa)] {
                    if want {
                        let dst = slot(adj, v, buf.len());
                        dst.iter_mut().zip(&buf).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::EdgeAggregate { weights, values, sources, targets } => {
                let wt = self.value(*weights);
                let h = if wt.shape().len() == 1 { 1 } else { wt.cols() };
                let w = wt.data();
                let vt = self.value(*values);
                let d = vt.cols();
                let v = vt.data();
                let dk = d / h;
                if self.wants(*weights) {
                    let dst = slot(adj, *weights, w.len());
                    for (k, (&src, &tgt)) in sources.iter().zip(targets.iter()).enumerate() {
                        for head in 0..h {
                            let mut acc = T::zero();
                            for c in head * dk..(head + 1) * dk {
                                acc += v[src * d + c] * g[tgt * d + c];
                            }
                            dst[k * h + head] += acc;
                        }
                    }
                }
                if self.wants(*values) {
                    let dst = slot(adj, *values, v.len());
                    for (k, (&src, &tgt)) in sources.iter().zip(targets.iter()).enumerate() {
                        for head in 0..h {
                            let wk = w[k * h + head];
                            for c in head * dk..(head + 1) * dk {
                                dst[src * d + c] += wk * g[tgt * d + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let dst = slot(adj, *a, n);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    fn backprop_binary(&self, kind: Binary, a: Var, b: Var, mode: Bcast, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let cols = self.value(a).cols().max(1);
        // b index for flat position k, without a division per element
        let for_each = |f: &mut dyn FnMut(usize, usize)| match mode {
            Bcast::Same => (0..g.len()).for_each(|k| f(k, k)),
            Bcast::Scalar => (0..g.len()).for_each(|k| f(k, 0)),
            Bcast::Row => {
                for r in 0..g.len() / cols {
                    for c in 0..cols {
                        f(r * cols + c, c);
                    }
                }
            }
        };
        let eps = match kind {
            Binary::DivEps(e) => T::lit(e),
            _ => T::zero(),
        };
        if self.wants(a) {
            let dst = slot(adj, a, g.len());
            match kind {
                Binary::Add | Binary::Sub => dst.iter_mut().zip(g).for_each(|(o, &v)| *o += v),
                Binary::Mul => for_each(&mut |k, j| dst[k] += g[k] * bv[j]),
                Binary::DivEps(_) => for_each(&mut |k, j| dst[k] += g[k] / guarded(bv[j], eps)),
            }
        }
        if self.wants(b) {
            let dst = slot(adj, b, nb);
            match kind {
                Binary::Add => for_each(&mut |k, j| dst[j] += g[k]),
                Binary::Sub => for_each(&mut |k, j| dst[j] -= g[k]),
                Binary::Mul => for_each(&mut |k, j| dst[j] += g[k] * av[k]),
                Binary::DivEps(_) => for_each(&mut |k, j| {
                    let den = guarded(bv[j], eps);
                    dst[j] -= g[k] * av[k] / (den * den);
                }),
            }
        }
    }
}

fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn check_edges(sources: &[usize], targets: &[usize], n: usize) -> Result<()> {
    if sources.len() != targets.len() {
        return Err(Error::dim(format!("{} sources for {} targets", sources.len(), targets.len())));
    }
    if let Some(&bad) = sources.iter().chain(targets).find(|&&i| i >= n) {
        return Err(Error::Index(format!("edge endpoint {bad} >= {n}")));
    }
    Ok(())
}

fn edge_extents(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [e] => Ok((*e, 1)),
        [e, h] if *h >= 1 => Ok((*e, *h)),
        _ => Err(Error::dim(format!("{what} expects [E] or [E, H], got {shape:?}"))),
    }
}
