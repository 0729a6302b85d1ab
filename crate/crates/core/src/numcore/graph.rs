//! Recording tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node, so nodes are always
//! in topological order. `backward` walks the tape once in reverse.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;

const ROPE_BASE: f64 = 10_000.0;
const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    MaskedLogSumExp { x: Var, mask: Tensor },
    Diag(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    MeanRows { x: Var, rows: Vec<usize> },
    SelectRow { x: Var, row: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, n_heads: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        key_mask: Option<Vec<bool>>,
        probs: Vec<f64>,
    },
    StopGradient,
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every named parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
}

fn dim_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn register(&mut self, name: &str, value: Cow<'a, Tensor>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let v = self.leaf(value, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Registers a named trainable leaf borrowing its value.
    pub fn param(&mut self, name: &str, value: &'a Tensor) -> Result<Var> {
        self.register(name, Cow::Borrowed(value))
    }

    pub fn param_owned(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.register(name, Cow::Owned(value))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("matmul_bt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Row sums as an `[m×1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::from_parts(vec![t.rows(), 1], data);
        self.push(out, Op::SumCols(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::tensor::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// `log Σ_j mask_ij · exp(x_ij)` per row, as an `[m×1]` column. The mask
    /// is a constant with nonnegative entries.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(dim_err("masked_logsumexp_rows", t, &mask));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let (xr, mr) = (t.row(i), mask.row(i));
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                data.push(f64::NEG_INFINITY);
                continue;
            }
            let mut s = 0.0;
            for j in 0..n {
                if mr[j] > 0.0 {
                    s += mr[j] * (xr[j] - max).exp();
                }
            }
            data.push(max + s.ln());
        }
        let out = Tensor::from_parts(vec![m, 1], data);
        Ok(self.push(out, Op::MaskedLogSumExp { x, mask }, &[x]))
    }

    /// Diagonal of a square matrix as an `[n×1]` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(dim_err("diag", t, t));
        }
        let data = (0..t.rows()).map(|i| t.get(i, i)).collect::<Vec<_>>();
        let out = Tensor::from_parts(vec![t.rows(), 1], data);
        Ok(self.push(out, Op::Diag(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.cols() {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![t.rows(), len], data);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::contract("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean of the listed rows as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() {
            return Err(Error::contract("mean over an empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::contract(format!("row {bad} out of range")));
        }
        let cols = t.cols();
        let mut acc = vec![0.0; cols];
        for &r in rows {
            for (a, &v) in acc.iter_mut().zip(t.row(r)) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::from_parts(vec![1, cols], acc);
        Ok(self.push(
            out,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        if row >= t.rows() {
            return Err(Error::contract(format!("row {row} out of range")));
        }
        let out = Tensor::from_parts(vec![1, t.cols()], t.row(row).to_vec());
        Ok(self.push(out, Op::SelectRow { x, row }, &[x]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = t.data().to_vec();
        for (i, row) in data.chunks_mut(cols).enumerate() {
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::contract(format!(
                    "cannot normalize row {i}: norm is {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Root-mean-square normalization of each row followed by a per-column
    /// gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (t, g) = (self.value(x), self.value(gain));
        if g.len() != t.cols() {
            return Err(dim_err("rms_norm", t, g));
        }
        let cols = t.cols();
        let mut inv_rms = Vec::with_capacity(t.rows());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            let r = 1.0 / (dot(row, row) / cols as f64 + RMS_EPS).sqrt();
            for (v, &gj) in row.iter_mut().zip(g.data()) {
                *v *= r * gj;
            }
            inv_rms.push(r);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position encoding applied independently in each head; row index
    /// is the position.
    pub fn rope(&mut self, x: Var, n_heads: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::contract(format!(
                "rope needs an even head dimension (width {d}, {n_heads} heads)"
            )));
        }
        let mut data = t.data().to_vec();
        rope_rotate(&mut data, t.rows(), d, n_heads, 1.0);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Rope { x, n_heads }, &[x]))
    }

    /// Multi-head scaled dot-product attention. `key_mask[j] == false`
    /// excludes key/value row `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d {
            return Err(dim_err("attention", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(dim_err("attention", tk, tv));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible into {n_heads} heads"
            )));
        }
        let (lq, lk) = (tq.rows(), tk.rows());
        if let Some(m) = &key_mask {
            if m.len() != lk {
                return Err(Error::contract("key mask length differs from key count"));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::contract("attention with every key masked"));
            }
        }
        let allowed = |j: usize| key_mask.as_ref().is_none_or(|m| m[j]);
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &tq.row(i)[off..off + dh];
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    if allowed(j) {
                        *pj = dot(qi, &tk.row(j)[off..off + dh]) * scale;
                        max = max.max(*pj);
                    }
                }
                let mut z = 0.0;
                for (j, pj) in p.iter_mut().enumerate() {
                    if allowed(j) {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    } else {
                        *pj = 0.0;
                    }
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    if !allowed(j) {
                        continue;
                    }
                    *pj /= z;
                    for (oc, &vc) in o.iter_mut().zip(&tv.row(j)[off..off + dh]) {
                        *oc += *pj * vc;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![lq, d], out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                key_mask,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::StopGradient,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Replaces the forward value of `x` with `forward` while passing the
    /// incoming gradient through unchanged.
    pub fn straight_through(&mut self, x: Var, forward: Tensor) -> Result<Var> {
        if forward.shape() != self.value(x).shape() {
            return Err(dim_err("straight_through", self.value(x), &forward));
        }
        Ok(self.push(forward, Op::StraightThrough(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(seed.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(gd, tb.data(), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(ta.data(), gd, m, k, n, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(gd, tb.data(), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(gd, ta.data(), m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        axpy(gv, 1.0, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, 1.0, gd);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, -1.0, gd);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(gd).zip(tb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(gd).zip(ta) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, *c, gd);
                }
            }
            Op::Square(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(gd).zip(ta) {
                        *x += 2.0 * ai * gi;
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(gd).zip(out.data()) {
                        *x += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(gd).zip(ta) {
                        *x += gi / ai;
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &v) in ga.iter_mut().zip(gd).zip(ta) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        *x += gi * d;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += gd[0]);
                }
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, &gi) in ga.chunks_mut(cols).zip(gd) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gx, y), gy) in ga
                        .chunks_mut(cols)
                        .zip(out.data().chunks(cols))
                        .zip(gd.chunks(cols))
                    {
                        let s = dot(y, gy);
                        for ((x, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
                            *x += yi * (gi - s);
                        }
                    }
                }
            }
            Op::MaskedLogSumExp { x, mask } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..tx.rows() {
                        let lse = out.data()[i];
                        if !lse.is_finite() {
                            continue;
                        }
                        for j in 0..cols {
                            let w = mask.get(i, j);
                            if w > 0.0 {
                                gx[i * cols + j] += gd[i] * w * (tx.get(i, j) - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::Diag(a) => {
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in gd.iter().enumerate() {
                        ga[i * n + i] += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(gp, 1.0, &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (i, row) in gp.chunks_mut(c).enumerate() {
                            axpy(row, 1.0, &gd[i * total + col..i * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, row) in gx.chunks_mut(cols).enumerate() {
                        axpy(&mut row[*start..start + len], 1.0, &gd[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * cols..(id + 1) * cols],
                            1.0,
                            &gd[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::MeanRows { x, rows } => {
                let cols = out.cols();
                let w = 1.0 / rows.len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for &r in rows {
                        axpy(&mut gx[r * cols..(r + 1) * cols], w, gd);
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let cols = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(&mut gx[row * cols..(row + 1) * cols], 1.0, gd);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let cols = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &n) in norms.iter().enumerate() {
                        let y = out.row(i);
                        let gy = &gd[i * cols..(i + 1) * cols];
                        let s = dot(y, gy);
                        for ((xg, &yi), &gi) in
                            gx[i * cols..(i + 1) * cols].iter_mut().zip(y).zip(gy)
                        {
                            *xg += (gi - yi * s) / n;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = self.value(*x);
                let tg = self.value(*gain).data();
                let cols = tx.cols();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (i, &r) in inv_rms.iter().enumerate() {
                        for ((a, &xi), &gi) in gg.iter_mut().zip(tx.row(i)).zip(&gd[i * cols..]) {
                            *a += gi * xi * r;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in inv_rms.iter().enumerate() {
                        let xr = tx.row(i);
                        let gy = &gd[i * cols..(i + 1) * cols];
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += gy[j] * tg[j] * xr[j];
                        }
                        let c = r * r * r * s / cols as f64;
                        for j in 0..cols {
                            gx[i * cols + j] += r * tg[j] * gy[j] - c * xr[j];
                        }
                    }
                }
            }
            Op::Rope { x, n_heads } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut back = gd.to_vec();
                    rope_rotate(&mut back, out.rows(), out.cols(), *n_heads, -1.0);
                    axpy(gx, 1.0, &back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                key_mask,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                *n_heads,
                key_mask.as_deref(),
                probs,
                gd,
                grads,
            ),
            Op::StraightThrough(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, 1.0, gd);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        n_heads: usize,
        key_mask: Option<&[bool]>,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (lq, lk) = (tq.rows(), tk.rows());
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let allowed = |j: usize| key_mask.is_none_or(|m| m[j]);

        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dv = vec![0.0; lk * d];
        let mut ds = vec![0.0; lk];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let go = &gd[i * d + off..i * d + off + dh];
                let mut s = 0.0;
                for j in 0..lk {
                    if allowed(j) {
                        ds[j] = dot(go, &tv.row(j)[off..off + dh]);
                        s += p[j] * ds[j];
                    }
                }
                let qi = &tq.row(i)[off..off + dh];
                for j in 0..lk {
                    if !allowed(j) {
                        continue;
                    }
                    let dsj = p[j] * (ds[j] - s) * scale;
                    let kj = &tk.row(j)[off..off + dh];
                    axpy(&mut dq[i * d + off..i * d + off + dh], dsj, kj);
                    axpy(&mut dk[j * d + off..j * d + off + dh], dsj, qi);
                    axpy(&mut dv[j * d + off..j * d + off + dh], p[j], go);
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                axpy(gv, 1.0, &buf);
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Rotates half-split pairs `(i, i + dh/2)` of every head by `sign · pos · θ_i`.
fn rope_rotate(data: &mut [f64], rows: usize, d: usize, n_heads: usize, sign: f64) {
    let dh = d / n_heads;
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / dh as f64))
        .collect();
    for pos in 0..rows {
        let row = &mut data[pos * d..(pos + 1) * d];
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos as f64 * f).sin_cos();
            for h in 0..n_heads {
                let a = h * dh + i;
                let b = a + half;
                let (xa, xb) = (row[a], row[b]);
                row[a] = xa * c - xb * s;
                row[b] = xa * s + xb * c;
            }
        }
    }
}
