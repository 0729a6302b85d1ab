use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use embedkit::checkpoint::Checkpoint;
use embedkit::corpus::{load_corpus_dir, Corpus, Mixture};
use embedkit::encoder::init_params;
use embedkit::evalharness::{mrl_sweep, retrieval_eval, sts_eval, EvalModel, RetrievalTask, StsTask};
use embedkit::quant::{apply_quant_scheme, QuantScheme};
use embedkit::soup::{soup_files, SoupSpec};
use embedkit::trainer::{mixture_search, train_run, write_trace, TrainConfig};

use crate::{json, Command, Failure, SchemeArg, TaskArg};

type CmdResult = Result<(), Failure>;

/// Prefixes a usage error with the flag it came from.
fn flagged(flag: &str) -> impl Fn(embedkit::Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{flag}: {m}")),
        Failure::Runtime(m) => Failure::Runtime(format!("{flag}: {m}")),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train {
            config,
            data,
            stage,
            init,
            out,
            trace,
        } => train(config.as_deref(), &data, stage.map(Into::into), init.as_deref(), &out, trace),
        Command::Embed {
            ckpt,
            input,
            dim,
            out,
        } => embed(&ckpt, &input, dim, &out),
        Command::Eval {
            ckpt,
            task,
            data,
            k,
            dims,
            out,
        } => eval(&ckpt, task, &data, k, &dims, out.as_deref()),
        Command::Soup { inputs, out } => soup(inputs, out),
        Command::Quantize {
            ckpt,
            scheme,
            block,
            out,
        } => quantize(&ckpt, scheme, block, &out),
        Command::Mixtures {
            data,
            n,
            concentration,
            seed,
            report,
            config,
            init,
            retrieval,
            sts,
        } => mixtures(MixturesArgs {
            data,
            n,
            concentration,
            seed,
            report,
            config,
            init,
            retrieval,
            sts,
        }),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))
}

/// The starting point of a run: the `--init` checkpoint, or a fresh model
/// of the configured architecture seeded with the run seed.
fn initial_checkpoint(cfg: &TrainConfig, init: Option<&Path>) -> Result<Checkpoint, Failure> {
    match init {
        Some(p) => {
            let ckpt = Checkpoint::load(p).map_err(flagged("--init"))?;
            ckpt.ensure_trainable().map_err(flagged("--init"))?;
            Ok(ckpt)
        }
        None => {
            cfg.encoder.validate().map_err(flagged("--config encoder"))?;
            let params = init_params(&cfg.encoder, cfg.seed)?;
            Ok(Checkpoint::new(cfg.encoder.clone(), params)?)
        }
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    let examples = load_corpus_dir(dir).map_err(flagged("--data"))?;
    if examples.is_empty() {
        return Err(usage(format!("--data {}: no examples found", dir.display())));
    }
    Ok(Corpus::new(examples))
}

fn train(
    config: Option<&Path>,
    data: &Path,
    stage: Option<embedkit::corpus::Stage>,
    init: Option<&Path>,
    out: &Path,
    trace: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = stage {
        cfg.stage = s;
    }
    let start = initial_checkpoint(&cfg, init)?;
    cfg.validate(start.config.d_out).map_err(flagged("--config"))?;
    let corpus = load_corpus(data)?;
    let outcome = train_run(&cfg, &corpus, &start)?;
    outcome.checkpoint.save(out)?;
    let trace = trace.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    write_trace(trace, &outcome.trace)?;
    Ok(())
}

#[derive(Serialize)]
struct EmbedOutput<'a> {
    id: &'a serde_json::Value,
    embedding: &'a [f64],
}

#[derive(Deserialize)]
struct EmbedInput {
    id: serde_json::Value,
    text: String,
}

fn embed(ckpt: &Path, input: &Path, dim: Option<usize>, out: &Path) -> CmdResult {
    let model = EvalModel::load(ckpt).map_err(flagged("--ckpt"))?;
    let dim = dim.unwrap_or(model.encoder.config.d_out);
    if !model.encoder.config.supports_dim(dim) {
        return Err(usage(format!(
            "--dim {dim}: must be d_out or a configured MRL dimension ({:?})",
            model.encoder.config.embedding_dims()
        )));
    }
    let file = fs::File::open(input).map_err(|e| usage(format!("--input {}: {e}", input.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbedInput = serde_json::from_str(&line)
            .map_err(|e| usage(format!("--input line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let mut w = BufWriter::new(fs::File::create(out)?);
    for row in rows {
        let e = model.encoder.embed(&row.text, dim)?;
        let record = EmbedOutput {
            id: &row.id,
            embedding: e.values(),
        };
        let text = json::to_string(&record).map_err(|e| Failure::Runtime(e.to_string()))?;
        writeln!(w, "{text}")?;
    }
    w.flush()?;
    Ok(())
}

fn eval(ckpt: &Path, task: TaskArg, data: &Path, k: usize, dims: &[usize], out: Option<&Path>) -> CmdResult {
    if k == 0 {
        return Err(usage("--k: must be at least 1"));
    }
    let model = EvalModel::load(ckpt).map_err(flagged("--ckpt"))?;
    let cfg = &model.encoder.config;
    let dims = if dims.is_empty() { vec![cfg.d_out] } else { dims.to_vec() };
    if let Some(bad) = dims.iter().find(|&&d| !cfg.supports_dim(d)) {
        return Err(usage(format!(
            "--dims {bad}: must be d_out or a configured MRL dimension ({:?})",
            cfg.embedding_dims()
        )));
    }
    let reports = match task {
        TaskArg::Retrieval => {
            let task = RetrievalTask::load(data).map_err(flagged("--data"))?;
            mrl_sweep(&task, &model, &dims, k)?
        }
        TaskArg::Sts => {
            let task = StsTask::load(data).map_err(flagged("--data"))?;
            dims.iter()
                .map(|&d| sts_eval(&task, &model, d))
                .collect::<embedkit::Result<Vec<_>>>()?
        }
    };
    json::emit(&reports, out)?;
    Ok(())
}

fn soup(inputs: Vec<PathBuf>, out: PathBuf) -> CmdResult {
    if inputs.len() < 2 {
        return Err(usage(format!(
            "--inputs: souping needs at least 2 checkpoints, got {}",
            inputs.len()
        )));
    }
    soup_files(&SoupSpec {
        inputs,
        output: out,
    })?;
    Ok(())
}

fn quantize(ckpt: &Path, scheme: SchemeArg, block: usize, out: &Path) -> CmdResult {
    let scheme = match scheme {
        SchemeArg::Int4Block => QuantScheme::int4_per_block(block),
        SchemeArg::Int8Block => QuantScheme::int8_per_block(block),
        SchemeArg::Mixed => QuantScheme::mixed_per_channel(),
    };
    scheme.validate().map_err(flagged("--block"))?;
    let float = Checkpoint::load(ckpt).map_err(flagged("--ckpt"))?;
    apply_quant_scheme(&float, &scheme)?.save(out)?;
    Ok(())
}

struct MixturesArgs {
    data: PathBuf,
    n: usize,
    concentration: f64,
    seed: u64,
    report: PathBuf,
    config: Option<PathBuf>,
    init: Option<PathBuf>,
    retrieval: Option<PathBuf>,
    sts: Option<PathBuf>,
}

fn mixtures(a: MixturesArgs) -> CmdResult {
    if !(a.concentration > 0.0 && a.concentration.is_finite()) {
        return Err(usage(format!(
            "--concentration {}: must be positive",
            a.concentration
        )));
    }
    if a.retrieval.is_none() && a.sts.is_none() {
        return Err(usage("--retrieval or --sts: at least one evaluation task is required"));
    }
    let cfg = load_config(a.config.as_deref())?;
    let start = initial_checkpoint(&cfg, a.init.as_deref())?;
    cfg.validate(start.config.d_out).map_err(flagged("--config"))?;
    let retrieval = a
        .retrieval
        .as_deref()
        .map(RetrievalTask::load)
        .transpose()
        .map_err(flagged("--retrieval"))?;
    let sts = a
        .sts
        .as_deref()
        .map(StsTask::load)
        .transpose()
        .map_err(flagged("--sts"))?;
    let corpus = load_corpus(&a.data)?;
    let seed_mixture = match &cfg.mixture {
        Some(m) => m.clone(),
        None => Mixture::uniform(&corpus.tags())?,
    };
    let d_out = start.config.d_out;
    let result = mixture_search(
        &cfg,
        &corpus,
        &start,
        &seed_mixture,
        a.n,
        a.concentration,
        a.seed,
        |_, ckpt| {
            let model = EvalModel::float(ckpt.encoder());
            let mut scores = BTreeMap::new();
            if let Some(t) = &retrieval {
                let r = retrieval_eval(t, &model, d_out, 10)?;
                scores.insert("retrieval".to_string(), r.metrics["mrr@10"]);
            }
            if let Some(t) = &sts {
                let r = sts_eval(t, &model, d_out)?;
                scores.insert("sts".to_string(), r.metrics["spearman"]);
            }
            Ok(scores)
        },
    )?;
    for f in &result.failed {
        eprintln!("candidate {:?} failed: {}", f.weights.weights(), f.error);
    }
    if result.candidates.is_empty() {
        return Err(Failure::Runtime("every candidate mixture failed".into()));
    }
    json::emit(&result.candidates, Some(&a.report))?;
    Ok(())
}
