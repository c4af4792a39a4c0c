//! Reverse-mode tape over 2-D matrices.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates exact gradients. Parameter
//! leaves are cached per graph, so a parameter used several times is a single
//! node whose gradient sums all uses.

use super::matrix::{dot, Matrix};
use super::params::{ParamId, ParameterSet};
use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    /// Stores `1/σ` per row; the node value is the normalized input.
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    WeightedRowSum(Var, Vec<f64>),
    MaskRows(Var, Vec<bool>),
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    FocalLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        gamma: f64,
    },
    L1 {
        x: Var,
        target: Matrix,
        row_weights: Vec<f64>,
    },
    SoftmaxCe(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of every parameter, aligned with the [`ParameterSet`] order.
pub type ParamGrads = Vec<Matrix>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: Vec<Option<Var>>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> NnError {
    NnError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, what: &str) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var, NnError> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_cache.get(id.0) {
            return *v;
        }
        let value = params.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_cache.len() <= id.0 {
            self.param_cache.resize(id.0 + 1, None);
        }
        self.param_cache[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b), "matmul_bt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("mul_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NnError> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NnError> {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Matrix::zeros(r, c);
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv), "layer_norm")
    }

    /// Row softmax. Columns with `mask[j] == false` get probability 0; at
    /// least one column must be unmasked.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NnError> {
        let x = self.value(a);
        let (r, c) = x.shape();
        if let Some(m) = mask {
            if m.len() != c {
                return Err(shape_err("softmax mask", (r, c), (1, m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(NnError::ShapeMismatch("softmax: every column masked".into()));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    orow[j] = (row[j] - mx).exp();
                    sum += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let r = self.shape(parts[0]).0;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let c = self.shape(parts[0]).1;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).1 != c) {
            return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c.max(1);
        self.push(Matrix::from_vec(r, c, data), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Gathers rows by index (repeats allowed); also serves as an embedding lookup.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NnError::ShapeMismatch(format!(
                "select_rows: index {bad} out of {r} rows"
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        self.push(
            Matrix::from_vec(idx.len(), c, data),
            Op::SelectRows(a, idx.to_vec()),
            "select_rows",
        )
    }

    /// `Σ_i w_i · a_i` as a `1×n` row.
    pub fn weighted_row_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if weights.len() != r {
            return Err(shape_err("weighted_row_sum", (r, c), (weights.len(), 1)));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(1, c);
        for (i, &w) in weights.iter().enumerate() {
            for (o, v) in out.row_mut(0).iter_mut().zip(x.row(i)) {
                *o += w * v;
            }
        }
        self.push(out, Op::WeightedRowSum(a, weights.to_vec()), "weighted_row_sum")
    }

    /// Zeroes rows whose mask entry is `false`.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if keep.len() != r {
            return Err(shape_err("mask_rows", (r, c), (keep.len(), 1)));
        }
        let mut out = self.value(a).clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(out, Op::MaskRows(a, keep.to_vec()), "mask_rows")
    }

    /// `Σ_k w_k · BCE(σ(x_k), t_k)` over all entries of `x` in row-major order.
    pub fn bce_with_logits(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<Var, NnError> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("bce_with_logits", self.shape(x), (targets.len(), weights.len())));
        }
        let loss: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        self.push(
            Matrix::filled(1, 1, loss),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Soft-target focal loss,
    /// `-[t (1-p)^γ ln p + (1-t) p^γ ln(1-p)]`, `p = σ(x)`, weighted like BCE.
    pub fn focal_with_logits(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
        gamma: f64,
    ) -> Result<Var, NnError> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("focal_with_logits", self.shape(x), (targets.len(), weights.len())));
        }
        let loss: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &w)| {
                let p = sigmoid(z);
                w * -(t * (1.0 - p).powf(gamma) * log_sigmoid(z)
                    + (1.0 - t) * p.powf(gamma) * log_sigmoid(-z))
            })
            .sum();
        self.push(
            Matrix::filled(1, 1, loss),
            Op::FocalLogits {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                gamma,
            },
            "focal_with_logits",
        )
    }

    /// `Σ_i w_i Σ_j |x_ij - t_ij|`.
    pub fn l1(&mut self, x: Var, target: &Matrix, row_weights: &[f64]) -> Result<Var, NnError> {
        let sx = self.shape(x);
        if sx != target.shape() || row_weights.len() != sx.0 {
            return Err(shape_err("l1", sx, target.shape()));
        }
        let xv = self.value(x);
        let loss: f64 = (0..sx.0)
            .map(|i| {
                row_weights[i]
                    * xv.row(i)
                        .iter()
                        .zip(target.row(i))
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
            })
            .sum();
        self.push(
            Matrix::filled(1, 1, loss),
            Op::L1 {
                x,
                target: target.clone(),
                row_weights: row_weights.to_vec(),
            },
            "l1",
        )
    }

    /// Cross-entropy of a `1×n` logit row against class `class`.
    pub fn softmax_cross_entropy(&mut self, x: Var, class: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(x);
        if r != 1 || class >= c {
            return Err(shape_err("softmax_cross_entropy", (r, c), (1, class)));
        }
        let row = self.value(x).row(0);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - row[class];
        self.push(Matrix::filled(1, 1, loss), Op::SoftmaxCe(x, class), "softmax_cross_entropy")
    }

    /// Back-propagates from a `1×1` node and returns gradients for every
    /// parameter of `params` (zero for unused ones).
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<ParamGrads, NnError> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward needs a scalar", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_bt(self.value(*b)));
                    acc(*b, self.value(*a).matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.matmul_at(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(*row, dr);
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row).row(0);
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.row_mut(i)[j] = g.get(i, j) * rv[j];
                            dr.row_mut(0)[j] += g.get(i, j) * av.get(i, j);
                        }
                    }
                    acc(*a, da);
                    acc(*row, dr);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv *= gelu_grad(xv);
                    }
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= 1.0 - y * y;
                    }
                    acc(*a, d);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let c = y.cols() as f64;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let mg = gy.iter().sum::<f64>() / c;
                        let mgy = dot(gy, yr) / c;
                        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                            *dv = inv[i] * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(*a, d);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let s = dot(g.row(i), p.row(i));
                        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                            *dv = p.get(i, j) * (g.get(i, j) - s);
                        }
                    }
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut d = Matrix::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        acc(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let d = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        acc(p, d);
                    }
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (dv, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *dv += v;
                        }
                    }
                    acc(*a, d);
                }
                Op::WeightedRowSum(a, w) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for (i, &wi) in w.iter().enumerate() {
                        for (dv, v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                            *dv = wi * v;
                        }
                    }
                    acc(*a, d);
                }
                Op::MaskRows(a, keep) => {
                    let mut d = g;
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            d.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    acc(*a, d);
                }
                Op::BceLogits { x, targets, weights } => {
                    let s = g.get(0, 0);
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, dv) in d.data_mut().iter_mut().enumerate() {
                        *dv = s * weights[k] * (sigmoid(xv.data()[k]) - targets[k]);
                    }
                    acc(*x, d);
                }
                Op::FocalLogits {
                    x,
                    targets,
                    weights,
                    gamma,
                } => {
                    let s = g.get(0, 0);
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, dv) in d.data_mut().iter_mut().enumerate() {
                        let z = xv.data()[k];
                        let t = targets[k];
                        let p = sigmoid(z);
                        let q = 1.0 - p;
                        // d/dz of -t q^γ ln p and -(1-t) p^γ ln q, using dp/dz = p q
                        let pos = t * (gamma * q.powf(*gamma) * p * log_sigmoid(z) - q.powf(gamma + 1.0));
                        let neg = (1.0 - t)
                            * (p.powf(gamma + 1.0) - gamma * p.powf(*gamma) * q * log_sigmoid(-z));
                        *dv = s * weights[k] * (pos + neg);
                    }
                    acc(*x, d);
                }
                Op::L1 {
                    x,
                    target,
                    row_weights,
                } => {
                    let s = g.get(0, 0);
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        for j in 0..xv.cols() {
                            let diff = xv.get(i, j) - target.get(i, j);
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d.set(i, j, s * row_weights[i] * sign);
                        }
                    }
                    acc(*x, d);
                }
                Op::SoftmaxCe(x, class) => {
                    let s = g.get(0, 0);
                    let row = self.value(*x).row(0);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let mut d = Matrix::zeros(1, row.len());
                    for (j, dv) in d.row_mut(0).iter_mut().enumerate() {
                        let p = (row[j] - mx).exp() / z;
                        *dv = s * (p - if j == *class { 1.0 } else { 0.0 });
                    }
                    acc(*x, d);
                }
            }
        }
        Ok(out)
    }
}
