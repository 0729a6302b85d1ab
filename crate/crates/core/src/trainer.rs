//! Optimization loop for both training stages, plus random mixture search.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_batches, sample_dirichlet_with, tokenize, Batch, Corpus, Mixture, Stage};
use crate::encoder::{bind_params, embed_graph, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{duplicates, total_loss_graph, BatchVars, LossConfig, TeacherEmbeddings};
use crate::numcore::{Graph, Tensor};
use crate::quant::QuantScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    /// Defaults to 64 for pre-finetuning and 8 for finetuning.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub qat: Option<QuantScheme>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub loss: LossConfig,
    /// Dataset weights; uniform over the corpus when absent.
    pub mixture: Option<Mixture>,
    /// Architecture for a fresh model when no initial checkpoint is given.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::desk();
        let loss = LossConfig {
            mrl_dims: encoder.mrl_dims.iter().copied().filter(|&d| d < encoder.d_out).collect(),
            ..LossConfig::default()
        };
        TrainConfig {
            stage: Stage::Prefinetune,
            steps: 1000,
            batch_size: None,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            qat: None,
            teacher_checkpoint: None,
            loss,
            mixture: None,
            encoder,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::Prefinetune => 64,
            Stage::Finetune => 8,
        })
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self, d_out: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.batch_size() < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if let Some(s) = &self.qat {
            s.validate()?;
        }
        self.loss.validate(d_out)?;
        let wants_teacher = self.loss.weights.distill > 0.0;
        match (&self.teacher_checkpoint, wants_teacher) {
            (None, true) => Err(Error::config(
                "loss.weights.distill > 0 requires teacher_checkpoint",
            )),
            (Some(_), false) => Err(Error::config(
                "teacher_checkpoint is set but loss.weights.distill is 0",
            )),
            _ => Ok(()),
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay. Decay applies to
/// matrices only; norm gains are left alone.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

impl AdamState {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One update of every parameter. Nothing is modified if any gradient is
/// missing, misshapen or non-finite.
pub fn optimizer_step(
    params: &mut EncoderParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of `{name}`"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let decay = if p.shape().len() == 2 { hp.weight_decay } else { 0.0 };
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            *w -= hp.lr * (step + decay * *w);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_d: f64,
}

pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,loss,l_c,l_s,l_d\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.loss, r.l_c, r.l_s, r.l_d
        )
        .expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Number of contrastive evaluations that included a hard-negative term.
    pub negative_terms: usize,
}

/// Caches full-width unit-norm teacher embeddings by formatted text.
pub struct Teacher {
    encoder: Encoder,
    cache: HashMap<String, Vec<f64>>,
}

impl Teacher {
    pub fn new(encoder: Encoder) -> Self {
        Teacher {
            encoder,
            cache: HashMap::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Teacher::new(Checkpoint::load(path)?.encoder()))
    }

    pub fn d_out(&self) -> usize {
        self.encoder.config.d_out
    }

    pub fn embed(&mut self, text: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(text) {
            let e = self.encoder.embed(text, self.encoder.config.d_out)?;
            self.cache.insert(text.to_string(), e.into_values());
        }
        Ok(&self.cache[text])
    }

    fn rows(&mut self, texts: &[String]) -> Result<Tensor> {
        let rows = texts
            .iter()
            .map(|t| self.embed(t).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

struct FormattedBatch {
    queries: Vec<String>,
    positives: Vec<String>,
    negatives: Option<Vec<String>>,
}

fn format_batch(batch: &Batch) -> Result<FormattedBatch> {
    let queries = batch
        .examples
        .iter()
        .map(|e| e.formatted_query())
        .collect::<Result<Vec<_>>>()?;
    let positives = batch
        .examples
        .iter()
        .map(|e| e.formatted_positive())
        .collect::<Result<Vec<_>>>()?;
    let negs = batch
        .examples
        .iter()
        .map(|e| e.formatted_negative())
        .collect::<Result<Vec<_>>>()?;
    // A batch either carries a negative for every row or for none.
    let negatives = if negs.iter().all(Option::is_some) {
        Some(negs.into_iter().flatten().collect())
    } else {
        None
    };
    Ok(FormattedBatch {
        queries,
        positives,
        negatives,
    })
}

struct StepResult {
    row: TraceRow,
    grads: BTreeMap<String, Tensor>,
    used_negatives: bool,
}

fn train_step(
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    params: &EncoderParams,
    batch: &FormattedBatch,
    teacher: Option<&mut Teacher>,
    step: usize,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, true, cfg.qat.as_ref())?;
    let embed_all = |g: &mut Graph<'_>, texts: &[String]| -> Result<_> {
        let rows = texts
            .iter()
            .map(|t| embed_graph(g, enc_cfg, &bound, &tokenize(t, enc_cfg.max_seq_len)))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    };
    let q_raw = embed_all(&mut g, &batch.queries)?;
    let p_raw = embed_all(&mut g, &batch.positives)?;
    let n_raw = match &batch.negatives {
        Some(n) => Some(embed_all(&mut g, n)?),
        None => None,
    };

    let d_out = enc_cfg.d_out;
    let mut per_dim = Vec::new();
    for dim in cfg.loss.dims(d_out) {
        let mut prefix = |x| -> Result<_> {
            let s = if dim == d_out { x } else { g.slice_cols(x, 0, dim)? };
            g.normalize_rows(s)
        };
        let bv = BatchVars {
            q: prefix(q_raw)?,
            p_pos: prefix(p_raw)?,
            p_neg: n_raw.map(&mut prefix).transpose()?,
        };
        per_dim.push((dim, bv));
    }

    let dup_q = duplicates(&batch.queries);
    let dup_p = duplicates(&batch.positives);
    let mask = if cfg.loss.literal_tn_diagonal {
        crate::losses::tn_mask_literal(&dup_q, &dup_p)?
    } else {
        crate::losses::tn_mask(&dup_q, &dup_p)?
    };
    let teacher_rows = match teacher {
        Some(t) => Some(TeacherEmbeddings {
            q: t.rows(&batch.queries)?,
            p_pos: t.rows(&batch.positives)?,
            p_neg: batch.negatives.as_ref().map(|n| t.rows(n)).transpose()?,
        }),
        None => None,
    };
    let parts = total_loss_graph(&mut g, &per_dim, &mask, teacher_rows.as_ref(), &cfg.loss)?;
    let scalar = |v| g.value(v).data()[0];
    let row = TraceRow {
        step,
        loss: scalar(parts.total),
        l_c: scalar(parts.l_c),
        l_s: scalar(parts.l_s),
        l_d: parts.l_d.map_or(0.0, scalar),
    };
    if !row.loss.is_finite() {
        return Err(Error::NonFinite {
            what: format!("training loss at step {step}"),
        });
    }
    let grads = g.backward(parts.total)?.into_map();
    Ok(StepResult {
        row,
        grads,
        used_negatives: batch.negatives.is_some(),
    })
}

/// Trains from `init`, loading the teacher named in the config if any.
pub fn train_run(cfg: &TrainConfig, corpus: &Corpus, init: &Checkpoint) -> Result<TrainOutcome> {
    let mut teacher = match &cfg.teacher_checkpoint {
        Some(p) => Some(Teacher::load(p)?),
        None => None,
    };
    train_with_teacher(cfg, corpus, init, teacher.as_mut())
}

/// Same as [`train_run`] with an already loaded teacher. The teacher is
/// used exactly when `loss.weights.distill > 0`.
pub fn train_with_teacher(
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: &Checkpoint,
    mut teacher: Option<&mut Teacher>,
) -> Result<TrainOutcome> {
    init.ensure_trainable()?;
    let enc_cfg = init.config.clone();
    let d_out = enc_cfg.d_out;
    let mut checked = cfg.clone();
    if teacher.is_some() && checked.teacher_checkpoint.is_none() {
        checked.teacher_checkpoint = Some(PathBuf::from("<in memory>"));
    }
    checked.validate(d_out)?;
    if cfg.loss.weights.distill > 0.0 && teacher.is_none() {
        return Err(Error::config("loss.weights.distill > 0 requires a teacher"));
    }
    if let Some(t) = &teacher {
        if t.d_out() != d_out {
            return Err(Error::config(format!(
                "teacher embeds into {} dimensions, student into {d_out}",
                t.d_out()
            )));
        }
    }
    let mixture = match &cfg.mixture {
        Some(m) => m.clone(),
        None => Mixture::uniform(&corpus.tags())?,
    };
    let stream = make_batches(corpus, &mixture, cfg.batch_size(), cfg.stage, cfg.seed)?;

    let mut params = init.params.clone();
    let mut state = AdamState::default();
    let hp = AdamHyper::from(cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut negative_terms = 0;
    for (step, batch) in stream.take(cfg.steps).enumerate() {
        let formatted = format_batch(&batch)?;
        let res = train_step(cfg, &enc_cfg, &params, &formatted, teacher.as_deref_mut(), step)?;
        if res.used_negatives {
            negative_terms += cfg.loss.dims(d_out).len();
        }
        optimizer_step(&mut params, &res.grads, &mut state, &hp).map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} at step {step}"),
            },
            other => other,
        })?;
        trace.push(res.row);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(enc_cfg, params)?,
        trace,
        negative_terms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureCandidate {
    pub weights: Mixture,
    pub scores: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixtureFailure {
    pub weights: Mixture,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixtureSearchResult {
    /// Successful candidates, best mean score first.
    pub candidates: Vec<MixtureCandidate>,
    pub failed: Vec<MixtureFailure>,
}

/// The seed mixture followed by `n_random` Dirichlet draws over its tags.
pub fn candidate_mixtures(
    seed_mixture: &Mixture,
    n_random: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Mixture>> {
    let tags: Vec<&String> = seed_mixture.weights().keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![seed_mixture.clone()];
    for _ in 0..n_random {
        out.push(sample_dirichlet_with(&tags, concentration, &mut rng)?);
    }
    Ok(out)
}

/// Scores every candidate with `run` and ranks them by mean score. A
/// candidate whose run fails is reported and left out of the ranking.
pub fn rank_mixtures<F>(candidates: Vec<Mixture>, mut run: F) -> MixtureSearchResult
where
    F: FnMut(&Mixture) -> Result<BTreeMap<String, f64>>,
{
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for m in candidates {
        match run(&m) {
            Ok(scores) if !scores.is_empty() && scores.values().all(|s| s.is_finite()) => {
                let mean = scores.values().sum::<f64>() / scores.len() as f64;
                ok.push(MixtureCandidate {
                    weights: m,
                    scores,
                    mean,
                });
            }
            Ok(_) => failed.push(MixtureFailure {
                weights: m,
                error: "evaluation returned no finite scores".to_string(),
            }),
            Err(e) => failed.push(MixtureFailure {
                weights: m,
                error: e.to_string(),
            }),
        }
    }
    // Stable sort keeps candidate order among equal means.
    ok.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    MixtureSearchResult {
        candidates: ok,
        failed,
    }
}

/// Trains one model per candidate mixture with otherwise identical settings
/// and ranks them by `eval_fn`.
#[allow(clippy::too_many_arguments)]
pub fn mixture_search<F>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: &Checkpoint,
    seed_mixture: &Mixture,
    n_random: usize,
    concentration: f64,
    seed: u64,
    mut eval_fn: F,
) -> Result<MixtureSearchResult>
where
    F: FnMut(&Mixture, &Checkpoint) -> Result<BTreeMap<String, f64>>,
{
    let candidates = candidate_mixtures(seed_mixture, n_random, concentration, seed)?;
    let mut teacher = match &cfg.teacher_checkpoint {
        Some(p) => Some(Teacher::load(p)?),
        None => None,
    };
    Ok(rank_mixtures(candidates, |m| {
        let run_cfg = TrainConfig {
            mixture: Some(m.clone()),
            ..cfg.clone()
        };
        let out = train_with_teacher(&run_cfg, corpus, init, teacher.as_mut())?;
        eval_fn(m, &out.checkpoint)
    }))
}
