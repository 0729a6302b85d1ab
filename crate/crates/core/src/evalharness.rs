//! Retrieval and semantic-similarity evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::AnyCheckpoint;
use crate::corpus::{format_passage, format_query, RETRIEVAL_QUERY_TEMPLATE, STS_TEMPLATE};
use crate::encoder::{normalize_prefix, Embedding, Encoder};
use crate::error::{Error, Result};
use crate::numcore::kernels::dot;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RetrievalTask {
    pub queries: Vec<Query>,
    pub documents: Vec<Document>,
    pub qrels: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RetrievalLine {
    Query {
        id: String,
        text: String,
    },
    Doc {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
        text: String,
    },
    Qrel {
        query: String,
        doc: String,
    },
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(serde_json::from_value(value).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, &item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() || self.documents.is_empty() {
            return Err(Error::contract("retrieval task needs queries and documents"));
        }
        let docs: BTreeSet<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        if docs.len() != self.documents.len() {
            return Err(Error::contract("retrieval task has duplicate document ids"));
        }
        let queries: BTreeSet<&str> = self.queries.iter().map(|q| q.id.as_str()).collect();
        if queries.len() != self.queries.len() {
            return Err(Error::contract("retrieval task has duplicate query ids"));
        }
        for q in &self.queries {
            if self.qrels.get(&q.id).is_none_or(BTreeSet::is_empty) {
                return Err(Error::contract(format!(
                    "query `{}` has no relevant document",
                    q.id
                )));
            }
        }
        for (q, rel) in &self.qrels {
            if !queries.contains(q.as_str()) {
                return Err(Error::contract(format!("qrel names unknown query `{q}`")));
            }
            if let Some(d) = rel.iter().find(|d| !docs.contains(d.as_str())) {
                return Err(Error::contract(format!("qrel names unknown document `{d}`")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut task = RetrievalTask::default();
        for line in read_json_lines::<RetrievalLine>(path.as_ref())? {
            match line {
                RetrievalLine::Query { id, text } => task.queries.push(Query { id, text }),
                RetrievalLine::Doc { id, title, text } => {
                    task.documents.push(Document { id, title, text })
                }
                RetrievalLine::Qrel { query, doc } => {
                    task.qrels.entry(query).or_default().insert(doc);
                }
            }
        }
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let queries = self.queries.iter().map(|q| RetrievalLine::Query {
            id: q.id.clone(),
            text: q.text.clone(),
        });
        let docs = self.documents.iter().map(|d| RetrievalLine::Doc {
            id: d.id.clone(),
            title: d.title.clone(),
            text: d.text.clone(),
        });
        let qrels = self.qrels.iter().flat_map(|(q, ds)| {
            ds.iter().map(move |d| RetrievalLine::Qrel {
                query: q.clone(),
                doc: d.clone(),
            })
        });
        write_json_lines(path.as_ref(), queries.chain(docs).chain(qrels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsPair {
    pub a: String,
    pub b: String,
    pub gold: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StsTask {
    pub pairs: Vec<StsPair>,
}

impl StsTask {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.len() < 2 {
            return Err(Error::contract("STS task needs at least 2 pairs"));
        }
        if self.pairs.iter().any(|p| !p.gold.is_finite()) {
            return Err(Error::contract("STS gold scores must be finite"));
        }
        let first = self.pairs[0].gold;
        if self.pairs.iter().all(|p| p.gold == first) {
            return Err(Error::contract("STS gold scores are all equal"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let task = StsTask {
            pairs: read_json_lines(path.as_ref())?,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json_lines(path.as_ref(), &self.pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub mrl_dim: usize,
    pub scheme: String,
    /// Set when the metric could not be computed meaningfully (constant
    /// predictions in STS).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// An encoder ready for evaluation, tagged with how its weights are stored.
#[derive(Clone, Debug)]
pub struct EvalModel {
    pub encoder: Encoder,
    pub scheme: String,
}

impl EvalModel {
    pub fn float(encoder: Encoder) -> Self {
        EvalModel {
            encoder,
            scheme: "float".to_string(),
        }
    }

    pub fn from_checkpoint(ckpt: AnyCheckpoint) -> Result<Self> {
        let scheme = ckpt.scheme_tag();
        Ok(EvalModel {
            encoder: ckpt.into_encoder()?,
            scheme,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(AnyCheckpoint::load(path)?)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if !self.encoder.config.supports_dim(dim) {
            return Err(Error::contract(format!(
                "dimension {dim} is neither d_out nor a configured MRL dimension"
            )));
        }
        Ok(())
    }
}

/// Document indices by decreasing similarity; equal similarities keep
/// ascending document-id order.
pub fn rank_documents(query: &[f64], docs: &[Embedding], doc_ids: &[&str]) -> Vec<usize> {
    let sims: Vec<f64> = docs.iter().map(|d| dot(query, d.values())).collect();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| doc_ids[a].cmp(doc_ids[b])));
    order
}

/// Recall@k and MRR@k from unit-norm query and document embeddings given in
/// task order.
pub fn retrieval_metrics(
    task: &RetrievalTask,
    queries: &[Embedding],
    docs: &[Embedding],
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let ids: Vec<&str> = task.documents.iter().map(|d| d.id.as_str()).collect();
    let mut hits = 0.0;
    let mut rr = 0.0;
    for (q, emb) in task.queries.iter().zip(queries) {
        let relevant = &task.qrels[&q.id];
        let ranking = rank_documents(emb.values(), docs, &ids);
        if let Some(pos) = ranking
            .iter()
            .take(k)
            .position(|&i| relevant.contains(ids[i]))
        {
            hits += 1.0;
            rr += 1.0 / (pos + 1) as f64;
        }
    }
    let n = task.queries.len() as f64;
    Ok((hits / n, rr / n))
}

/// Reports `recall@1`, `recall@{k}` and `mrr@{k}`.
pub fn retrieval_eval(
    task: &RetrievalTask,
    model: &EvalModel,
    mrl_dim: usize,
    k: usize,
) -> Result<EvalReport> {
    let mut reports = mrl_sweep(task, model, &[mrl_dim], k)?;
    Ok(reports.remove(0))
}

/// One retrieval report per prefix length, all from a single embedding pass.
pub fn mrl_sweep(
    task: &RetrievalTask,
    model: &EvalModel,
    dims: &[usize],
    k: usize,
) -> Result<Vec<EvalReport>> {
    task.validate()?;
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    for &d in dims {
        model.check_dim(d)?;
    }
    let enc = &model.encoder;
    let q_raw = task
        .queries
        .iter()
        .map(|q| enc.embed_raw(&format_query(RETRIEVAL_QUERY_TEMPLATE, &q.text)?))
        .collect::<Result<Vec<_>>>()?;
    let d_raw = task
        .documents
        .iter()
        .map(|d| enc.embed_raw(&format_passage(d.title.as_deref(), &d.text)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        let prefix = |raw: &[Vec<f64>]| {
            raw.iter()
                .map(|r| normalize_prefix(r, dim))
                .collect::<Result<Vec<_>>>()
        };
        let (qs, ds) = (prefix(&q_raw)?, prefix(&d_raw)?);
        let (r1, _) = retrieval_metrics(task, &qs, &ds, 1)?;
        let (rk, mrr) = retrieval_metrics(task, &qs, &ds, k)?;
        let metrics = BTreeMap::from([
            ("recall@1".to_string(), r1),
            (format!("recall@{k}"), rk),
            (format!("mrr@{k}"), mrr),
        ]);
        out.push(EvalReport {
            metrics,
            mrl_dim: dim,
            scheme: model.scheme.clone(),
            degenerate: false,
        });
    }
    Ok(out)
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean.
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation with average-rank ties. Returns `None` when either
/// side has no variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between cosine similarities and gold scores.
pub fn sts_eval(task: &StsTask, model: &EvalModel, mrl_dim: usize) -> Result<EvalReport> {
    task.validate()?;
    model.check_dim(mrl_dim)?;
    let embed = |t: &str| -> Result<Embedding> {
        model
            .encoder
            .embed(&format_query(STS_TEMPLATE, t)?, mrl_dim)
    };
    let mut preds = Vec::with_capacity(task.pairs.len());
    for p in &task.pairs {
        let (a, b) = (embed(&p.a)?, embed(&p.b)?);
        preds.push(dot(a.values(), b.values()));
    }
    let gold: Vec<f64> = task.pairs.iter().map(|p| p.gold).collect();
    Ok(sts_report(&preds, &gold, mrl_dim, &model.scheme))
}

/// Report for precomputed predictions.
pub fn sts_report(preds: &[f64], gold: &[f64], mrl_dim: usize, scheme: &str) -> EvalReport {
    let rho = spearman(preds, gold);
    EvalReport {
        metrics: BTreeMap::from([("spearman".to_string(), rho.unwrap_or(0.0))]),
        mrl_dim,
        scheme: scheme.to_string(),
        degenerate: rho.is_none(),
    }
}
