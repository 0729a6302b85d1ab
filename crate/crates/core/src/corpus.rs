//! Training data: JSON-lines ingestion, byte tokenization, prompt templates,
//! Dirichlet mixtures and single-dataset batch streams.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 256;
pub const BOS_ID: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub const RETRIEVAL_QUERY_TEMPLATE: &str = "task: search result | query: {content}";
pub const RETRIEVAL_PASSAGE_TEMPLATE: &str = "title: {title} | text: {content}";
pub const STS_TEMPLATE: &str = "task: sentence similarity | query: {content}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefinetune,
    Finetune,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefinetune" => Ok(Stage::Prefinetune),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config(format!(
                "unknown stage `{other}` (expected prefinetune or finetune)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dataset: String,
    pub task_query: String,
    pub task_passage: String,
    pub query: String,
    pub positive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl TrainingExample {
    pub fn formatted_query(&self) -> Result<String> {
        format_query(&self.task_query, &self.query)
    }

    pub fn formatted_positive(&self) -> Result<String> {
        apply_template(&self.task_passage, self.title.as_deref(), &self.positive)
    }

    /// Negatives carry no title of their own.
    pub fn formatted_negative(&self) -> Result<Option<String>> {
        self.negative
            .as_deref()
            .map(|n| apply_template(&self.task_passage, None, n))
            .transpose()
    }
}

/// Byte-level token ids: a BOS marker, UTF-8 bytes, then right padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        if let Some(first_pad) = ids.iter().position(|&id| id == PAD_ID) {
            if ids[first_pad..].iter().any(|&id| id != PAD_ID) {
                return Err(Error::contract("pad token followed by content"));
            }
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading non-pad positions.
    pub fn content_len(&self) -> usize {
        self.ids.iter().take_while(|&&id| id != PAD_ID).count()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

pub fn tokenize(text: &str, max_seq_len: usize) -> TokenSeq {
    let max_seq_len = max_seq_len.max(1);
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(BOS_ID);
    ids.extend(text.bytes().take(max_seq_len - 1).map(u32::from));
    ids.resize(max_seq_len, PAD_ID);
    TokenSeq { ids }
}

/// Bytes carried by a sequence, without BOS and padding.
pub fn detokenize(seq: &TokenSeq) -> Vec<u8> {
    seq.ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect()
}

/// Substitutes `{content}` (and `{title}`, if present) into a template.
pub fn apply_template(template: &str, title: Option<&str>, content: &str) -> Result<String> {
    if !template.contains("{content}") {
        return Err(Error::config(format!(
            "template `{template}` has no {{content}} placeholder"
        )));
    }
    let with_title = template.replace("{title}", title.unwrap_or("none"));
    Ok(with_title.replace("{content}", content))
}

pub fn format_query(template: &str, content: &str) -> Result<String> {
    apply_template(template, None, content)
}

/// `title: {title or "none"} | text: {content}`. An empty title is kept
/// as-is; only an absent one becomes "none".
pub fn format_passage(title: Option<&str>, content: &str) -> String {
    format!("title: {} | text: {content}", title.unwrap_or("none"))
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let file = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let ex: TrainingExample =
            serde_json::from_value(value).map_err(|e| Error::Schema {
                line: lineno,
                message: e.to_string(),
            })?;
        if ex.query.is_empty() || ex.positive.is_empty() {
            return Err(Error::Schema {
                line: lineno,
                message: "query and positive must be non-empty".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Loads every `*.jsonl` file of a directory in file-name order.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let mut paths: Vec<_> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_examples(&p).map_err(|e| match e {
            Error::Io(io) => Error::Io(io),
            other => Error::config(format!("{}: {other}", p.display())),
        })?);
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Sampling weight per dataset tag, on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mixture {
    weights: BTreeMap<String, f64>,
}

impl Mixture {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("mixture has no datasets"));
        }
        if let Some((tag, w)) = weights.iter().find(|(_, &w)| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("mixture weight for `{tag}` is {w}")));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Mixture { weights })
    }

    pub fn uniform<S: AsRef<str>>(tags: &[S]) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::contract("uniform mixture over no tags"));
        }
        let w = 1.0 / tags.len() as f64;
        let mut weights: BTreeMap<String, f64> =
            tags.iter().map(|t| (t.as_ref().to_string(), w)).collect();
        renormalize(&mut weights);
        Ok(Mixture { weights })
    }

    pub fn weight(&self, tag: &str) -> f64 {
        self.weights.get(tag).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }
}

fn renormalize(weights: &mut BTreeMap<String, f64>) {
    let total: f64 = weights.values().sum();
    weights.values_mut().for_each(|w| *w /= total);
}

/// Normalized independent Gamma(concentration, 1) draws, one per tag.
pub fn sample_dirichlet_mixture<S: AsRef<str>>(
    tags: &[S],
    concentration: f64,
    seed: u64,
) -> Result<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_dirichlet_with(tags, concentration, &mut rng)
}

pub(crate) fn sample_dirichlet_with<S: AsRef<str>>(
    tags: &[S],
    concentration: f64,
    rng: &mut impl Rng,
) -> Result<Mixture> {
    if tags.is_empty() {
        return Err(Error::contract("Dirichlet mixture over an empty tag list"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::contract(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::contract(format!("gamma distribution: {e}")))?;
    let mut draws: Vec<f64> = tags.iter().map(|_| gamma.sample(rng)).collect();
    // Tiny concentrations can underflow every draw.
    if draws.iter().sum::<f64>() <= 0.0 {
        let pick = rng.random_range(0..draws.len());
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = (i == pick) as u8 as f64);
    }
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for (t, d) in tags.iter().zip(draws) {
        *weights.entry(t.as_ref().to_string()).or_default() += d;
    }
    renormalize(&mut weights);
    Ok(Mixture { weights })
}

/// Examples grouped by dataset tag, each group in load order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    datasets: BTreeMap<String, Vec<TrainingExample>>,
}

impl Corpus {
    pub fn new(examples: Vec<TrainingExample>) -> Self {
        let mut datasets: BTreeMap<String, Vec<TrainingExample>> = BTreeMap::new();
        for ex in examples {
            datasets.entry(ex.dataset.clone()).or_default().push(ex);
        }
        Corpus { datasets }
    }

    pub fn tags(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }

    pub fn dataset(&self, tag: &str) -> Option<&[TrainingExample]> {
        self.datasets.get(tag).map(Vec::as_slice)
    }

    pub fn examples(&self) -> impl Iterator<Item = &TrainingExample> {
        self.datasets.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.datasets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dataset: String,
    pub examples: Vec<TrainingExample>,
}

/// Endless, seeded stream of single-dataset batches.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    choices: Vec<(String, f64)>,
    orders: BTreeMap<String, (Vec<usize>, usize)>,
    batch_size: usize,
    stage: Stage,
    rng: ChaCha8Rng,
}

pub fn make_batches<'c>(
    corpus: &'c Corpus,
    mixture: &Mixture,
    batch_size: usize,
    stage: Stage,
    seed: u64,
) -> Result<BatchStream<'c>> {
    if batch_size < 2 {
        return Err(Error::config(format!("batch size {batch_size} must be at least 2")));
    }
    let mut choices = Vec::new();
    for (tag, &w) in mixture.weights() {
        let Some(examples) = corpus.dataset(tag) else {
            return Err(Error::config(format!("mixture names unknown dataset `{tag}`")));
        };
        if w == 0.0 {
            continue;
        }
        if examples.len() < batch_size {
            return Err(Error::config(format!(
                "dataset `{tag}` has {} examples, fewer than batch size {batch_size}",
                examples.len()
            )));
        }
        if stage == Stage::Finetune {
            if let Some(i) = examples.iter().position(|e| e.negative.is_none()) {
                return Err(Error::config(format!(
                    "finetune stage needs hard negatives; dataset `{tag}` example {i} has none"
                )));
            }
        }
        choices.push((tag.clone(), w));
    }
    if choices.is_empty() {
        return Err(Error::config("mixture puts zero weight on every dataset"));
    }
    Ok(BatchStream {
        corpus,
        choices,
        orders: BTreeMap::new(),
        batch_size,
        stage,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl BatchStream<'_> {
    fn pick_dataset(&mut self) -> String {
        let total: f64 = self.choices.iter().map(|(_, w)| w).sum();
        let u = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (tag, w) in &self.choices {
            acc += w;
            if u < acc {
                return tag.clone();
            }
        }
        self.choices.last().map(|(t, _)| t.clone()).unwrap_or_default()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let tag = self.pick_dataset();
        let examples = self.corpus.dataset(&tag)?;
        let bs = self.batch_size;
        let (order, cursor) = self
            .orders
            .entry(tag.clone())
            .or_insert_with(|| (Vec::new(), usize::MAX));
        // A new epoch starts when the remaining examples cannot fill a batch.
        if *cursor == usize::MAX || *cursor + bs > order.len() {
            *order = (0..examples.len()).collect();
            order.shuffle(&mut self.rng);
            *cursor = 0;
        }
        let picked = order[*cursor..*cursor + bs]
            .iter()
            .map(|&i| {
                let mut ex = examples[i].clone();
                if self.stage == Stage::Prefinetune {
                    ex.negative = None;
                }
                ex
            })
            .collect();
        *cursor += bs;
        Some(Batch {
            dataset: tag,
            examples: picked,
        })
    }
}
