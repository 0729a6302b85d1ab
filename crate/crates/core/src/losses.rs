//! Training objectives: masked contrastive loss with hardness-weighted
//! negatives, the spread-out regularizer, embedding matching against a
//! frozen teacher, and their nested-prefix (MRL) sum.
//!
//! Each objective exists twice: a `*_graph` builder that records onto a
//! [`Graph`] for training, and a value-level wrapper over plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{kernels, Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub spreadout: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrastive: 1.0,
            spreadout: 1.0,
            distill: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Extra prefix lengths, strictly descending. The full width is always
    /// included and need not be listed.
    pub mrl_dims: Vec<usize>,
    pub weights: LossWeights,
    /// Use the duplicate mask exactly as written, which also removes each
    /// row's own positive from its denominator. Off by default.
    pub literal_tn_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            mrl_dims: Vec::new(),
            weights: LossWeights::default(),
            literal_tn_diagonal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, d_out: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "loss.alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        let w = self.weights;
        for (name, v) in [
            ("contrastive", w.contrastive),
            ("spreadout", w.spreadout),
            ("distill", w.distill),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("loss.weights.{name} must be finite")));
            }
        }
        if self.mrl_dims.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::config(format!(
                "loss.mrl_dims must be strictly descending, got {:?}",
                self.mrl_dims
            )));
        }
        if let Some(&bad) = self.mrl_dims.iter().find(|&&d| d == 0 || d > d_out) {
            return Err(Error::config(format!(
                "loss.mrl_dims entry {bad} outside 1..={d_out}"
            )));
        }
        Ok(())
    }

    /// Every prefix length that receives contrastive and spread-out terms,
    /// full width first.
    pub fn dims(&self, d_out: usize) -> Vec<usize> {
        let mut dims = vec![d_out];
        dims.extend(self.mrl_dims.iter().copied().filter(|&d| d != d_out));
        dims
    }
}

/// `m[i][j]` is true when `items[i] == items[j]`.
pub fn duplicates<T: PartialEq>(items: &[T]) -> Vec<Vec<bool>> {
    items
        .iter()
        .map(|a| items.iter().map(|b| a == b).collect())
        .collect()
}

/// Unit-norm embeddings of one batch at one prefix length.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub q: Tensor,
    pub p_pos: Tensor,
    pub p_neg: Option<Tensor>,
    pub dup_q: Vec<Vec<bool>>,
    pub dup_p: Vec<Vec<bool>>,
}

impl BatchEmbeddings {
    /// Batch without recorded duplicates.
    pub fn distinct(q: Tensor, p_pos: Tensor, p_neg: Option<Tensor>) -> Self {
        let b = q.rows();
        let eye: Vec<Vec<bool>> = (0..b).map(|i| (0..b).map(|j| i == j).collect()).collect();
        BatchEmbeddings {
            q,
            p_pos,
            p_neg,
            dup_q: eye.clone(),
            dup_p: eye,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.q.rows()
    }

    fn check(&self) -> Result<()> {
        let (b, d) = (self.q.rows(), self.q.cols());
        let same = |t: &Tensor| t.shape() == [b, d];
        if !same(&self.p_pos) || !self.p_neg.as_ref().is_none_or(same) {
            return Err(Error::contract("batch embeddings must all be [B×d]"));
        }
        Ok(())
    }
}

/// Frozen teacher embeddings for the rows of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbeddings {
    pub q: Tensor,
    pub p_pos: Tensor,
    pub p_neg: Option<Tensor>,
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "cosine similarity of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = kernels::dot(x, x).sqrt();
    let ny = kernels::dot(y, y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((kernels::dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// False-negative mask: entry (i, j) is 0 when i ≠ j and either the queries
/// or the positives of rows i and j coincide. The diagonal stays 1 so each
/// row keeps its own positive in the denominator.
pub fn tn_mask(dup_q: &[Vec<bool>], dup_p: &[Vec<bool>]) -> Result<Tensor> {
    build_mask(dup_q, dup_p, false)
}

/// The mask read literally: the diagonal is 0 as well.
pub fn tn_mask_literal(dup_q: &[Vec<bool>], dup_p: &[Vec<bool>]) -> Result<Tensor> {
    build_mask(dup_q, dup_p, true)
}

fn build_mask(dup_q: &[Vec<bool>], dup_p: &[Vec<bool>], literal: bool) -> Result<Tensor> {
    let b = dup_q.len();
    let square = |m: &[Vec<bool>]| m.len() == b && m.iter().all(|r| r.len() == b);
    if b == 0 || !square(dup_q) || !square(dup_p) {
        return Err(Error::contract("duplicate matrices must be square and of equal size"));
    }
    let mut data = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            let masked = if i == j {
                literal
            } else {
                dup_q[i][j] || dup_p[i][j]
            };
            data.push(if masked { 0.0 } else { 1.0 });
        }
    }
    Tensor::new(vec![b, b], data)
}

/// `exp(α·s)`; in the loss it is a constant with respect to gradients.
pub fn hardness_weight(s_neg: f64, alpha: f64) -> f64 {
    (alpha * s_neg).exp()
}

/// Contrastive loss over unit-norm rows `q`, `p_pos` and optional `p_neg`.
///
/// Row i contributes `−s(q_i,p_i⁺)/τ + log( w_i·e^{s(q_i,p_i⁻)/τ} +
/// Σ_j mask_ij·e^{s(q_i,p_j⁺)/τ} )` with `w_i = exp(α·sg(s(q_i,p_i⁻)))`.
/// The weighted negative enters as the single logit `s/τ + α·sg(s)`.
pub fn contrastive_graph(
    g: &mut Graph<'_>,
    q: Var,
    p_pos: Var,
    p_neg: Option<Var>,
    mask: &Tensor,
    tau: f64,
    alpha: f64,
) -> Result<Var> {
    let b = g.value(q).rows();
    if b == 0 || mask.shape() != [b, b] {
        return Err(Error::contract(format!(
            "mask shape {:?} does not match batch size {b}",
            mask.shape()
        )));
    }
    let sims = g.matmul_bt(q, p_pos)?;
    let logits = g.scale(sims, 1.0 / tau);
    let positive = g.diag(logits)?;
    let (all, full_mask) = match p_neg {
        Some(n) => {
            let prod = g.mul(q, n)?;
            let s_neg = g.sum_cols(prod);
            let scaled = g.scale(s_neg, 1.0 / tau);
            let frozen = g.stop_gradient(s_neg);
            let log_w = g.scale(frozen, alpha);
            let neg_logit = g.add(scaled, log_w)?;
            let all = g.concat_cols(&[neg_logit, logits])?;
            let mut m = Vec::with_capacity(b * (b + 1));
            for i in 0..b {
                m.push(1.0);
                m.extend_from_slice(mask.row(i));
            }
            (all, Tensor::new(vec![b, b + 1], m)?)
        }
        None => {
            if let Some(i) = (0..b).find(|&i| mask.row(i).iter().all(|&m| m == 0.0)) {
                return Err(Error::contract(format!(
                    "row {i} has an empty denominator (no negatives and fully masked)"
                )));
            }
            (logits, mask.clone())
        }
    };
    let lse = g.masked_logsumexp_rows(all, full_mask)?;
    let per_row = g.sub(lse, positive)?;
    Ok(g.mean(per_row))
}

/// Second-moment spread-out term for each of `q` and `p_pos`:
/// `(1/(B(B−1))) Σ_{i≠j} (x_i·x_j)²`.
pub fn spreadout_graph(g: &mut Graph<'_>, q: Var, p_pos: Var) -> Result<Var> {
    let b = g.value(q).rows();
    if b < 2 {
        return Err(Error::contract(format!(
            "spread-out loss needs at least 2 rows, got {b}"
        )));
    }
    let norm = 1.0 / (b * (b - 1)) as f64;
    let mut terms = Vec::with_capacity(2);
    for x in [q, p_pos] {
        let gram = g.matmul_bt(x, x)?;
        let sq = g.square(gram);
        let all = g.sum(sq);
        let d = g.diag(gram)?;
        let dsq = g.square(d);
        let on_diag = g.sum(dsq);
        let off = g.sub(all, on_diag)?;
        terms.push(g.scale(off, norm));
    }
    g.add(terms[0], terms[1])
}

/// `(1/B) Σ_i ‖s_i − t_i‖²` summed over queries, positives and, when present
/// on both sides, negatives.
pub fn embed_match_graph(
    g: &mut Graph<'_>,
    student: [Option<Var>; 3],
    teacher: &TeacherEmbeddings,
) -> Result<Var> {
    let targets = [Some(&teacher.q), Some(&teacher.p_pos), teacher.p_neg.as_ref()];
    let mut terms = Vec::new();
    for (s, t) in student.into_iter().zip(targets) {
        let (Some(s), Some(t)) = (s, t) else { continue };
        if g.value(s).shape() != t.shape() {
            return Err(Error::contract(format!(
                "student rows {:?} and teacher rows {:?} differ in shape",
                g.value(s).shape(),
                t.shape()
            )));
        }
        let b = t.rows() as f64;
        let tv = g.constant(t.clone());
        let diff = g.sub(s, tv)?;
        let sq = g.square(diff);
        let total = g.sum(sq);
        terms.push(g.scale(total, 1.0 / b));
    }
    let mut acc = *terms
        .first()
        .ok_or_else(|| Error::contract("embedding matching with no terms"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Graph handles of one batch at one prefix length.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub q: Var,
    pub p_pos: Var,
    pub p_neg: Option<Var>,
}

/// Loss components as recorded in the training trace. `l_c` and `l_s` are
/// summed over prefix lengths before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub l_c: Var,
    pub l_s: Var,
    pub l_d: Option<Var>,
}

/// `Σ_dims (w_C·L_C + w_S·L_S) + w_D·L_D`, with the distillation term taken
/// at full width only. `per_dim` must cover `cfg.dims(d_out)`, full width
/// first.
pub fn total_loss_graph(
    g: &mut Graph<'_>,
    per_dim: &[(usize, BatchVars)],
    mask: &Tensor,
    teacher: Option<&TeacherEmbeddings>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let (&(d_out, full), _) = per_dim
        .split_first()
        .ok_or_else(|| Error::contract("total loss needs at least the full-width batch"))?;
    for want in cfg.dims(d_out) {
        if !per_dim.iter().any(|(d, _)| *d == want) {
            return Err(Error::contract(format!("missing embeddings at prefix {want}")));
        }
    }
    let mut l_c = Vec::new();
    let mut l_s = Vec::new();
    for &(_, bv) in per_dim {
        l_c.push(contrastive_graph(
            g, bv.q, bv.p_pos, bv.p_neg, mask, cfg.tau, cfg.alpha,
        )?);
        l_s.push(spreadout_graph(g, bv.q, bv.p_pos)?);
    }
    let l_c = sum_vars(g, &l_c)?;
    let l_s = sum_vars(g, &l_s)?;
    let wc = g.scale(l_c, cfg.weights.contrastive);
    let ws = g.scale(l_s, cfg.weights.spreadout);
    let mut total = g.add(wc, ws)?;
    let mut l_d = None;
    if let Some(t) = teacher {
        let d = embed_match_graph(g, [Some(full.q), Some(full.p_pos), full.p_neg], t)?;
        let wd = g.scale(d, cfg.weights.distill);
        total = g.add(total, wd)?;
        l_d = Some(d);
    }
    Ok(LossParts { total, l_c, l_s, l_d })
}

fn sum_vars(g: &mut Graph<'_>, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn mask_for(be: &BatchEmbeddings, literal: bool) -> Result<Tensor> {
    build_mask(&be.dup_q, &be.dup_p, literal)
}

pub fn contrastive_loss(be: &BatchEmbeddings, cfg: &LossConfig) -> Result<f64> {
    be.check()?;
    if be.batch_size() == 0 {
        return Err(Error::contract("contrastive loss of an empty batch"));
    }
    let mask = mask_for(be, cfg.literal_tn_diagonal)?;
    let mut g = Graph::new();
    let q = g.constant_ref(&be.q);
    let p = g.constant_ref(&be.p_pos);
    let n = be.p_neg.as_ref().map(|t| g.constant_ref(t));
    let out = contrastive_graph(&mut g, q, p, n, &mask, cfg.tau, cfg.alpha)?;
    Ok(g.value(out).data()[0])
}

pub fn spreadout_loss(q: &Tensor, p_pos: &Tensor) -> Result<f64> {
    if q.shape() != p_pos.shape() {
        return Err(Error::contract("spread-out inputs differ in shape"));
    }
    let mut g = Graph::new();
    let a = g.constant_ref(q);
    let b = g.constant_ref(p_pos);
    let out = spreadout_graph(&mut g, a, b)?;
    Ok(g.value(out).data()[0])
}

/// Mean off-diagonal dot product of `q` and of `p_pos`, summed. Reported as a
/// diagnostic only; training never uses it.
pub fn spreadout_first_moment(q: &Tensor, p_pos: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for x in [q, p_pos] {
        let b = x.rows();
        if b < 2 {
            return Err(Error::contract("first moment needs at least 2 rows"));
        }
        let gram = x.matmul(&x.transpose())?;
        let mut s = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    s += gram.get(i, j);
                }
            }
        }
        total += s / (b * (b - 1)) as f64;
    }
    Ok(total)
}

pub fn embed_match_loss(student: &BatchEmbeddings, teacher: &TeacherEmbeddings) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant_ref(&student.q);
    let p = g.constant_ref(&student.p_pos);
    let n = student.p_neg.as_ref().map(|t| g.constant_ref(t));
    let out = embed_match_graph(&mut g, [Some(q), Some(p), n], teacher)?;
    Ok(g.value(out).data()[0])
}

/// Value-level total loss. `per_dim` lists `(prefix, embeddings)` with the
/// full width first; the duplicate pattern of the first entry builds the
/// mask.
pub fn total_loss(
    per_dim: &[(usize, BatchEmbeddings)],
    teacher: Option<&TeacherEmbeddings>,
    cfg: &LossConfig,
) -> Result<f64> {
    let first = &per_dim
        .first()
        .ok_or_else(|| Error::contract("total loss needs at least the full-width batch"))?
        .1;
    let mask = mask_for(first, cfg.literal_tn_diagonal)?;
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(per_dim.len());
    for (d, be) in per_dim {
        be.check()?;
        vars.push((
            *d,
            BatchVars {
                q: g.constant_ref(&be.q),
                p_pos: g.constant_ref(&be.p_pos),
                p_neg: be.p_neg.as_ref().map(|t| g.constant_ref(t)),
            },
        ));
    }
    let parts = total_loss_graph(&mut g, &vars, &mask, teacher, cfg)?;
    Ok(g.value(parts.total).data()[0])
}
