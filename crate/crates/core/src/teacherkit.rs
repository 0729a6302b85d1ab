//! Synthetic desk-scale corpora with known structure, and the frozen
//! teacher encoder used for embedding-matching distillation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    write_examples, Corpus, Stage, TrainingExample, RETRIEVAL_PASSAGE_TEMPLATE,
    RETRIEVAL_QUERY_TEMPLATE,
};
use crate::encoder::{init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalharness::{Document, Query, RetrievalTask, StsPair, StsTask};
use crate::losses::{LossConfig, LossWeights};
use crate::trainer::{train_with_teacher, TrainConfig};

const DEFAULT_KEYWORDS: [&str; 16] = [
    "amber", "basil", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "kelp", "lotus", "marble", "nectar", "onyx", "prairie",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub examples_per_cluster: usize,
    /// One keyword per cluster; the built-in list is used when empty.
    pub keywords: Vec<String>,
    /// Clusters are spread round-robin over this many dataset tags.
    pub n_datasets: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clusters: 8,
            examples_per_cluster: 8,
            keywords: Vec::new(),
            n_datasets: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::config("n_clusters must be at least 2"));
        }
        if self.examples_per_cluster == 0 {
            return Err(Error::config("examples_per_cluster must be at least 1"));
        }
        if self.n_datasets == 0 || self.n_datasets > self.n_clusters {
            return Err(Error::config("n_datasets must lie in 1..=n_clusters"));
        }
        let kws = self.keywords();
        if kws.len() < self.n_clusters {
            return Err(Error::config(format!(
                "{} clusters need as many keywords, have {}",
                self.n_clusters,
                kws.len()
            )));
        }
        let distinct: BTreeSet<&String> = kws[..self.n_clusters].iter().collect();
        if distinct.len() != self.n_clusters || distinct.iter().any(|k| k.is_empty()) {
            return Err(Error::config("cluster keywords must be distinct and non-empty"));
        }
        Ok(())
    }

    fn keywords(&self) -> Vec<String> {
        if self.keywords.is_empty() {
            DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect()
        } else {
            self.keywords.clone()
        }
    }
}

fn bigrams(word: &str) -> BTreeSet<(char, char)> {
    let chars: Vec<char> = word.chars().collect();
    chars.windows(2).map(|w| (w[0], w[1])).collect()
}

fn jaccard(a: &BTreeSet<(char, char)>, b: &BTreeSet<(char, char)>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// For each keyword, the index of the most similar other keyword by
/// character-bigram Jaccard overlap (lowest index on ties).
pub fn nearest_clusters(keywords: &[String]) -> Vec<usize> {
    let grams: Vec<_> = keywords.iter().map(|k| bigrams(k)).collect();
    (0..keywords.len())
        .map(|i| {
            let mut best = None;
            for j in (0..keywords.len()).filter(|&j| j != i) {
                let s = jaccard(&grams[i], &grams[j]);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
            best.map_or(0, |(j, _)| j)
        })
        .collect()
}

/// Pronounceable unique item names built from consonant-vowel syllables.
fn item_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name: String = (0..3)
            .flat_map(|_| {
                [
                    C[rng.random_range(0..C.len())] as char,
                    V[rng.random_range(0..V.len())] as char,
                ]
            })
            .collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub examples: Vec<TrainingExample>,
    /// Cluster index of each example.
    pub clusters: Vec<usize>,
    /// Every query against every positive; each query's own positive is its
    /// single relevant document.
    pub retrieval: RetrievalTask,
    /// Query/passage pairs graded 1 (same item), 0.5 (same cluster) or 0.
    pub sts: StsTask,
}

impl SyntheticCorpus {
    pub fn corpus(&self) -> Corpus {
        Corpus::new(self.examples.clone())
    }

    /// Writes `corpus/<tag>.jsonl`, `retrieval.jsonl` and `sts.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let corpus_dir = dir.join("corpus");
        fs::create_dir_all(&corpus_dir)?;
        let mut by_tag: BTreeMap<&str, Vec<TrainingExample>> = BTreeMap::new();
        for ex in &self.examples {
            by_tag.entry(&ex.dataset).or_default().push(ex.clone());
        }
        for (tag, exs) in by_tag {
            write_examples(corpus_dir.join(format!("{tag}.jsonl")), &exs)?;
        }
        self.retrieval.save(dir.join("retrieval.jsonl"))?;
        self.sts.save(dir.join("sts.jsonl"))
    }
}

pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let keywords = spec.keywords()[..spec.n_clusters].to_vec();
    let nearest = nearest_clusters(&keywords);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per = spec.examples_per_cluster;
    let items = item_names(spec.n_clusters * per, &mut rng);

    let positive = |c: usize, k: usize| format!("{} {} record", items[c * per + k], keywords[c]);
    let mut examples = Vec::new();
    let mut clusters = Vec::new();
    for (c, kw) in keywords.iter().enumerate() {
        for k in 0..per {
            let neg_cluster = nearest[c];
            let neg_item = rng.random_range(0..per);
            examples.push(TrainingExample {
                dataset: format!("synth-{}", c % spec.n_datasets),
                task_query: RETRIEVAL_QUERY_TEMPLATE.to_string(),
                task_passage: RETRIEVAL_PASSAGE_TEMPLATE.to_string(),
                query: format!("{kw} {}", items[c * per + k]),
                positive: positive(c, k),
                negative: Some(positive(neg_cluster, neg_item)),
                title: None,
            });
            clusters.push(c);
        }
    }

    let width = examples.len().to_string().len().max(3);
    let mut retrieval = RetrievalTask::default();
    for (i, ex) in examples.iter().enumerate() {
        let (qid, did) = (format!("q{i:0width$}"), format!("d{i:0width$}"));
        retrieval.queries.push(Query {
            id: qid.clone(),
            text: ex.query.clone(),
        });
        retrieval.documents.push(Document {
            id: did.clone(),
            title: None,
            text: ex.positive.clone(),
        });
        retrieval.qrels.insert(qid, BTreeSet::from([did]));
    }

    let mut pairs = Vec::new();
    let n = examples.len();
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && clusters[j] == clusters[i]).collect();
        let other: Vec<usize> = (0..n).filter(|&j| clusters[j] != clusters[i]).collect();
        let q = &examples[i].query;
        pairs.push(StsPair {
            a: q.clone(),
            b: examples[i].positive.clone(),
            gold: 1.0,
        });
        if let Some(&j) = same.choose(&mut rng) {
            pairs.push(StsPair {
                a: q.clone(),
                b: examples[j].positive.clone(),
                gold: 0.5,
            });
        }
        if let Some(&j) = other.choose(&mut rng) {
            pairs.push(StsPair {
                a: q.clone(),
                b: examples[j].positive.clone(),
                gold: 0.0,
            });
        }
    }
    let sts = StsTask { pairs };
    retrieval.validate()?;
    sts.validate()?;
    Ok(SyntheticCorpus {
        examples,
        clusters,
        retrieval,
        sts,
    })
}

/// Training settings for the teacher: the larger architecture, contrastive
/// and spread-out terms only.
pub fn teacher_train_config(seed: u64) -> TrainConfig {
    let encoder = EncoderConfig::teacher();
    TrainConfig {
        stage: Stage::Prefinetune,
        steps: 150,
        batch_size: Some(16),
        learning_rate: 1e-3,
        seed,
        loss: LossConfig {
            mrl_dims: encoder.mrl_dims.clone(),
            weights: LossWeights {
                distill: 0.0,
                ..LossWeights::default()
            },
            ..LossConfig::default()
        },
        encoder,
        ..TrainConfig::default()
    }
}

pub fn build_teacher(corpus: &Corpus, seed: u64) -> Result<Checkpoint> {
    build_teacher_with(corpus, &teacher_train_config(seed))
}

/// Trains `cfg.encoder` from a fresh initialization without distillation
/// and marks the result frozen.
pub fn build_teacher_with(corpus: &Corpus, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.loss.weights.distill != 0.0 || cfg.teacher_checkpoint.is_some() {
        return Err(Error::config("a teacher is trained without distillation"));
    }
    let init = Checkpoint::new(cfg.encoder.clone(), init_params(&cfg.encoder, cfg.seed)?)?;
    let mut ckpt = train_with_teacher(cfg, corpus, &init, None)?.checkpoint;
    ckpt.frozen = true;
    Ok(ckpt)
}
