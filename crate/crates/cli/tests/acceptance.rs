//! Acceptance run. Prints one PASS/FAIL line per criterion, followed by the
//! measurements behind it, and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::{Command, ExitCode};
use std::thread;
use std::time::Instant;

use embedkit::corpus::{
    format_passage, format_query, sample_dirichlet_mixture, tokenize, Corpus, Stage,
    RETRIEVAL_QUERY_TEMPLATE, STS_TEMPLATE,
};
use embedkit::encoder::{bind_params, embed_graph, init_params};
use embedkit::evalharness::{
    mrl_sweep, retrieval_eval, sts_eval, Document, EvalModel, Query, RetrievalTask, StsPair, StsTask,
};
use embedkit::losses::{
    contrastive_graph, duplicates, embed_match_graph, spreadout_graph, spreadout_loss, tn_mask,
    tn_mask_literal, total_loss_graph, BatchVars, LossConfig, LossWeights, TeacherEmbeddings,
};
use embedkit::numcore::{finite_diff_grad, max_relative_error};
use embedkit::quant::{apply_quant_scheme, QuantizedTensor, StoredTensor};
use embedkit::soup::soup_checkpoints;
use embedkit::teacherkit::{build_teacher, make_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
use embedkit::trainer::{train_run, train_with_teacher, Teacher, TrainConfig, TrainOutcome};
use embedkit::{AnyCheckpoint, Checkpoint, Encoder, EncoderConfig, Graph, QuantScheme, Result, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 7;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, as a fraction of the largest
/// gradient entry. Coordinates far below that scale are at the resolution
/// of a central difference at eps 1e-5 (about ulp(f) / 2eps) and compare on
/// an absolute scale instead.
const GRAD_FLOOR: f64 = 1e-5;

fn floor_for(grad: &Tensor) -> f64 {
    GRAD_FLOOR * grad.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()))
}

struct Verdict {
    pass: bool,
    notes: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict {
            pass: true,
            notes: Vec::new(),
        }
    }

    /// Records a measurement that must hold for the criterion to pass.
    fn require(&mut self, ok: bool, note: String) {
        self.pass &= ok;
        self.notes.push(format!("[{}] {note}", if ok { "ok" } else { "FAILED" }));
    }

    fn note(&mut self, note: String) {
        self.notes.push(note);
    }
}

// ---------------------------------------------------------------- oracles

fn cos(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}

fn prefix(t: &Tensor, dim: usize) -> Tensor {
    let rows: Vec<&[f64]> = (0..t.rows()).map(|i| &t.row(i)[..dim]).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Contrastive loss written out term by term over raw rows, with the
/// hardness weights supplied as constants.
fn nce_oracle(
    q: &Tensor,
    p: &Tensor,
    n: Option<&Tensor>,
    dq: &[Vec<bool>],
    dp: &[Vec<bool>],
    tau: f64,
    w: &[f64],
) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        if let Some(n) = n {
            denom += w[i] * (cos(q.row(i), n.row(i)) / tau).exp();
        }
        for j in 0..b {
            if i != j && (dq[i][j] || dp[i][j]) {
                continue;
            }
            denom += (cos(q.row(i), p.row(j)) / tau).exp();
        }
        total += denom.ln() - cos(q.row(i), p.row(i)) / tau;
    }
    total / b as f64
}

fn hardness(q: &Tensor, n: &Tensor, alpha: f64) -> Vec<f64> {
    (0..q.rows()).map(|i| (alpha * cos(q.row(i), n.row(i))).exp()).collect()
}

fn spread_oracle(q: &Tensor, p: &Tensor) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for x in [q, p] {
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    total += cos(x.row(i), x.row(j)).powi(2);
                }
            }
        }
    }
    total / (b * (b - 1)) as f64
}

fn match_oracle(student: [Option<&Tensor>; 3], teacher: [Option<&Tensor>; 3]) -> f64 {
    let mut total = 0.0;
    for (s, t) in student.into_iter().zip(teacher) {
        let (Some(s), Some(t)) = (s, t) else { continue };
        for i in 0..s.rows() {
            let n: f64 = s.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            total += s.row(i).iter().zip(t.row(i)).map(|(a, b)| (a / n - b).powi(2)).sum::<f64>() / s.rows() as f64;
        }
    }
    total
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sphere(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Tape gradients of `build` against central differences of `oracle`,
/// input by input. Returns the largest relative error.
fn grad_check<B, O>(inputs: &[Tensor], build: B, oracle: O) -> f64
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
    O: Fn(&[Tensor]) -> f64,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("x{i}"), t).unwrap())
        .collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |probe| {
                let mut all = inputs.to_vec();
                all[i] = probe.clone();
                Ok(oracle(&all))
            },
            x,
            1e-5,
        )
        .unwrap();
        let analytic = grads.get(&format!("x{i}")).unwrap();
        worst = worst.max(max_relative_error(analytic, &fd, floor_for(analytic)));
    }
    worst
}

fn normalized(g: &mut Graph, v: Var) -> Var {
    g.normalize_rows(v).unwrap()
}

// ------------------------------------------------------------ criterion 1

fn loss_gradients(seed: u64, cfg: &LossConfig) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (5, 8);
    let (q, p, n) = (random(&[b, d], &mut rng), random(&[b, d], &mut rng), random(&[b, d], &mut rng));
    let distinct = duplicates(&[0, 1, 2, 3, 4]);
    let (tau, alpha) = (cfg.tau, cfg.alpha);

    let with_neg = |q: &Tensor, p: &Tensor, n: &Tensor, dq: Vec<Vec<bool>>, dp: Vec<Vec<bool>>| {
        let mask = tn_mask(&dq, &dp).unwrap();
        let w = hardness(q, n, alpha);
        grad_check(
            &[q.clone(), p.clone(), n.clone()],
            |g, v| {
                let (a, b, c) = (normalized(g, v[0]), normalized(g, v[1]), normalized(g, v[2]));
                contrastive_graph(g, a, b, Some(c), &mask, tau, alpha)
            },
            |x| nce_oracle(&x[0], &x[1], Some(&x[2]), &dq, &dp, tau, &w),
        )
    };
    let negatives = with_neg(&q, &p, &n, distinct.clone(), distinct.clone());

    let mask = tn_mask(&distinct, &distinct).unwrap();
    let no_negatives = grad_check(
        &[q.clone(), p.clone()],
        |g, v| {
            let (a, b) = (normalized(g, v[0]), normalized(g, v[1]));
            contrastive_graph(g, a, b, None, &mask, tau, alpha)
        },
        |x| nce_oracle(&x[0], &x[1], None, &distinct, &distinct, tau, &[]),
    );

    // Rows 1 and 3 share a query, rows 0 and 4 a positive.
    let (mut qd, mut pd) = (q.clone(), p.clone());
    qd.data_mut().copy_within(d..2 * d, 3 * d);
    pd.data_mut().copy_within(0..d, 4 * d);
    let dups = with_neg(
        &qd,
        &pd,
        &n,
        duplicates(&["a", "b", "c", "b", "e"]),
        duplicates(&["x", "y", "z", "w", "x"]),
    );

    let teacher = [sphere(b, d, &mut rng), sphere(b, d, &mut rng), sphere(b, d, &mut rng)];
    let te = TeacherEmbeddings {
        q: teacher[0].clone(),
        p_pos: teacher[1].clone(),
        p_neg: Some(teacher[2].clone()),
    };
    let spread = grad_check(
        &[q.clone(), p.clone()],
        |g, v| {
            let (a, b) = (normalized(g, v[0]), normalized(g, v[1]));
            spreadout_graph(g, a, b)
        },
        |x| spread_oracle(&x[0], &x[1]),
    );
    let matching = grad_check(
        &[q, p, n],
        |g, v| {
            let s = [normalized(g, v[0]), normalized(g, v[1]), normalized(g, v[2])];
            embed_match_graph(g, [Some(s[0]), Some(s[1]), Some(s[2])], &te)
        },
        |x| match_oracle([Some(&x[0]), Some(&x[1]), Some(&x[2])], [Some(&teacher[0]), Some(&teacher[1]), Some(&teacher[2])]),
    );
    [negatives, no_negatives, dups, spread.max(matching)]
}

/// Full training objective through the desk encoder, checked on sampled
/// parameter coordinates.
fn encoder_gradient(seed: u64, synth: &SyntheticCorpus, cfg: &LossConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let enc_cfg = EncoderConfig::desk();
    let params = init_params(&enc_cfg, seed).unwrap();
    let picks: Vec<_> = synth.examples.choose_multiple(&mut rng, 4).collect();
    let texts = |f: &dyn Fn(&embedkit::corpus::TrainingExample) -> String| -> Vec<String> {
        picks.iter().map(|e| f(e)).collect()
    };
    let qs = texts(&|e| e.formatted_query().unwrap());
    let ps = texts(&|e| e.formatted_positive().unwrap());
    let ns = texts(&|e| e.formatted_negative().unwrap().unwrap());
    let b = qs.len();
    let teacher = TeacherEmbeddings {
        q: sphere(b, 16, &mut rng),
        p_pos: sphere(b, 16, &mut rng),
        p_neg: Some(sphere(b, 16, &mut rng)),
    };
    let (dq, dp) = (duplicates(&qs), duplicates(&ps));
    let mask = tn_mask(&dq, &dp).unwrap();
    let dims = cfg.dims(16);

    let mut g = Graph::new();
    let bound = bind_params(&mut g, &params, true, None).unwrap();
    let embed_rows = |g: &mut Graph<'_>, ts: &[String]| {
        let rows: Vec<Var> = ts
            .iter()
            .map(|t| embed_graph(g, &enc_cfg, &bound, &tokenize(t, enc_cfg.max_seq_len)).unwrap())
            .collect();
        g.concat_rows(&rows).unwrap()
    };
    let (qv, pv, nv) = (embed_rows(&mut g, &qs), embed_rows(&mut g, &ps), embed_rows(&mut g, &ns));
    let mut per_dim = Vec::new();
    for &dim in &dims {
        let mut cut = |v| {
            let s = if dim == 16 { v } else { g.slice_cols(v, 0, dim).unwrap() };
            g.normalize_rows(s).unwrap()
        };
        per_dim.push((
            dim,
            BatchVars {
                q: cut(qv),
                p_pos: cut(pv),
                p_neg: Some(cut(nv)),
            },
        ));
    }
    let parts = total_loss_graph(&mut g, &per_dim, &mask, Some(&teacher), cfg).unwrap();
    let grads = g.backward(parts.total).unwrap();

    let raw = |p: &embedkit::EncoderParams, ts: &[String]| {
        let enc = Encoder {
            config: enc_cfg.clone(),
            params: p.clone(),
        };
        let rows: Vec<Vec<f64>> = ts.iter().map(|t| enc.embed_raw(t).unwrap()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let base = [raw(&params, &qs), raw(&params, &ps), raw(&params, &ns)];
    let weights: Vec<Vec<f64>> = dims
        .iter()
        .map(|&d| hardness(&prefix(&base[0], d), &prefix(&base[2], d), cfg.alpha))
        .collect();
    let w = cfg.weights;
    let oracle = |p: &embedkit::EncoderParams| {
        let (q, pp, n) = (raw(p, &qs), raw(p, &ps), raw(p, &ns));
        let mut total = 0.0;
        for (k, &d) in dims.iter().enumerate() {
            let (q, pp, n) = (prefix(&q, d), prefix(&pp, d), prefix(&n, d));
            total += w.contrastive * nce_oracle(&q, &pp, Some(&n), &dq, &dp, cfg.tau, &weights[k]);
            total += w.spreadout * spread_oracle(&q, &pp);
        }
        let t = [Some(&teacher.q), Some(&teacher.p_pos), teacher.p_neg.as_ref()];
        total + w.distill * match_oracle([Some(&q), Some(&pp), Some(&n)], t)
    };

    let token_rows: Vec<usize> = qs
        .iter()
        .chain(&ps)
        .chain(&ns)
        .flat_map(|t| tokenize(t, enc_cfg.max_seq_len).ids().to_vec())
        .map(|i| i as usize)
        .collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap();
        let floor = floor_for(analytic);
        for _ in 0..3 {
            let idx = if name == "embed.tokens" {
                let row = token_rows[rng.random_range(0..token_rows.len())];
                row * t.cols() + rng.random_range(0..t.cols())
            } else {
                rng.random_range(0..t.len())
            };
            let mut probe = params.clone();
            let orig = t.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let up = oracle(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let down = oracle(&probe);
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.data()[idx];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        }
    }
    worst
}

fn criterion_1(synth: &SyntheticCorpus) -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new();
    let cfg = LossConfig::default();
    let mut worst = [0.0f64; 5];
    for seed in 0..10 {
        for (w, e) in worst.iter_mut().zip(loss_gradients(seed, &cfg)) {
            *w = w.max(e);
        }
    }
    let total_cfg = LossConfig {
        mrl_dims: vec![8, 4],
        weights: LossWeights {
            contrastive: 1.0,
            spreadout: 1.0,
            distill: 1.0,
        },
        ..LossConfig::default()
    };
    for seed in 0..10 {
        worst[4] = worst[4].max(encoder_gradient(seed, synth, &total_cfg));
    }
    let names = [
        "contrastive with negatives",
        "contrastive without negatives",
        "contrastive with duplicates",
        "spread-out and embedding match",
        "total loss through the desk encoder",
    ];
    for (name, w) in names.iter().zip(worst) {
        v.require(w < GRAD_TOL, format!("{name}: max relative error {w:.2e} over 10 batches"));
    }
    let secs = start.elapsed().as_secs_f64();
    v.require(secs < 120.0, format!("runtime {secs:.1}s"));
    v
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Verdict {
    let mut v = Verdict::new();
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for b in 1..=3usize {
        let n = b * b;
        for bits in 0u64..(1 << (2 * n)) {
            let bit = |k: usize| bits >> k & 1 == 1;
            let dq: Vec<Vec<bool>> = (0..b).map(|i| (0..b).map(|j| bit(i * b + j)).collect()).collect();
            let dp: Vec<Vec<bool>> = (0..b).map(|i| (0..b).map(|j| bit(n + i * b + j)).collect()).collect();
            let m = tn_mask(&dq, &dp).unwrap();
            let lit = tn_mask_literal(&dq, &dp).unwrap();
            for i in 0..b {
                for j in 0..b {
                    let dup = dq[i][j] || dp[i][j];
                    let want = if i == j || !dup { 1.0 } else { 0.0 };
                    let want_lit = if i == j || dup { 0.0 } else { 1.0 };
                    mismatches += (m.get(i, j) != want) as usize + (lit.get(i, j) != want_lit) as usize;
                }
            }
            checked += 1;
        }
    }
    v.require(mismatches == 0, format!("{checked} exhaustive patterns for B <= 3, {mismatches} mismatched entries"));

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut bad = 0usize;
    for _ in 0..1000 {
        let qs: Vec<String> = (0..8).map(|_| format!("q{}", rng.random_range(0..4))).collect();
        let ps: Vec<String> = (0..8).map(|_| format!("p{}", rng.random_range(0..5))).collect();
        let m = tn_mask(&duplicates(&qs), &duplicates(&ps)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let masked = i != j && (qs[i] == qs[j] || ps[i] == ps[j]);
                bad += (m.get(i, j) != if masked { 0.0 } else { 1.0 }) as usize;
            }
        }
    }
    v.require(bad == 0, format!("1000 random B=8 batches, {bad} mismatched entries"));
    v
}

// ------------------------------------------------------------ criterion 3

fn criterion_3() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let vals: Vec<f64> = (0..100)
        .map(|_| spreadout_loss(&sphere(64, 16, &mut rng), &sphere(64, 16, &mut rng)).unwrap())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let z = (mean - 0.125) / se;
    v.require(z.abs() <= 3.0, format!("mean {mean:.6} vs 0.125, standard error {se:.2e}, z = {z:.2}"));
    v
}

// ----------------------------------------------------------- criterion 10

fn random_task(rng: &mut ChaCha8Rng, t: usize) -> RetrievalTask {
    let n_docs = rng.random_range(2..=100);
    let n_q = rng.random_range(1..=20);
    let words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "tau", "rho"];
    let sentence = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(1..5))
            .map(|_| *words.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut documents: Vec<Document> = Vec::new();
    for i in 0..n_docs {
        // Repeated texts produce exactly tied similarities.
        let text = if i > 0 && rng.random_bool(0.2) {
            documents[rng.random_range(0..i)].text.clone()
        } else {
            sentence(rng)
        };
        documents.push(Document {
            id: format!("t{t}-d{:03}", (i * 37) % 101),
            title: rng.random_bool(0.3).then(|| "shared title".to_string()),
            text,
        });
    }
    let queries: Vec<Query> = (0..n_q)
        .map(|i| Query {
            id: format!("q{i}"),
            text: sentence(rng),
        })
        .collect();
    let mut qrels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for q in &queries {
        for _ in 0..rng.random_range(1..=3) {
            let d = &documents[rng.random_range(0..n_docs)];
            qrels.entry(q.id.clone()).or_default().insert(d.id.clone());
        }
    }
    RetrievalTask {
        queries,
        documents,
        qrels,
    }
}

/// Recall@k and MRR@k from a full sort of every document.
fn retrieval_oracle(task: &RetrievalTask, enc: &Encoder, dim: usize, k: usize) -> (f64, f64, f64) {
    let docs: Vec<Vec<f64>> = task
        .documents
        .iter()
        .map(|d| enc.embed(&format_passage(d.title.as_deref(), &d.text), dim).unwrap().into_values())
        .collect();
    let (mut r1, mut rk, mut mrr) = (0.0, 0.0, 0.0);
    for q in &task.queries {
        let qe = enc
            .embed(&format_query(RETRIEVAL_QUERY_TEMPLATE, &q.text).unwrap(), dim)
            .unwrap()
            .into_values();
        let sim: Vec<f64> = docs.iter().map(|d| qe.iter().zip(d).map(|(a, b)| a * b).sum()).collect();
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| {
            sim[b]
                .partial_cmp(&sim[a])
                .unwrap()
                .then_with(|| task.documents[a].id.cmp(&task.documents[b].id))
        });
        let first = 1 + order
            .iter()
            .position(|&j| task.qrels[&q.id].contains(&task.documents[j].id))
            .unwrap();
        r1 += (first == 1) as u8 as f64;
        if first <= k {
            rk += 1.0;
            mrr += 1.0 / first as f64;
        }
    }
    let n = task.queries.len() as f64;
    (r1 / n, rk / n, mrr / n)
}

/// Spearman correlation from pairwise-counted average ranks.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_10() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for t in 0..50 {
        let task = random_task(&mut rng, t);
        let enc = Encoder::init(EncoderConfig::desk(), t as u64).unwrap();
        let dim = [16, 8, 4][t % 3];
        let k = rng.random_range(1..=10);
        let report = retrieval_eval(&task, &EvalModel::float(enc.clone()), dim, k).unwrap();
        let (r1, rk, mrr) = retrieval_oracle(&task, &enc, dim, k);
        for (key, want) in [("recall@1".to_string(), r1), (format!("recall@{k}"), rk), (format!("mrr@{k}"), mrr)] {
            worst = worst.max((report.metrics[&key] - want).abs());
        }
    }
    v.require(worst < 1e-12, format!("50 random retrieval tasks, max metric difference {worst:.1e}"));

    let mut worst: f64 = 0.0;
    let mut tied = 0;
    for t in 0..50u64 {
        let enc = Encoder::init(EncoderConfig::desk(), 100 + t).unwrap();
        let n = rng.random_range(3..30);
        let pairs: Vec<StsPair> = (0..n)
            .map(|i| {
                // Every third pair repeats the first one, tying its prediction.
                let j = if i % 3 == 2 { 0 } else { i };
                StsPair {
                    a: format!("sentence {j} of task {t}"),
                    b: format!("another {} sentence", j * 7 % 5),
                    gold: rng.random_range(0..4) as f64,
                }
            })
            .collect();
        let task = StsTask { pairs };
        if task.validate().is_err() {
            continue;
        }
        let report = sts_eval(&task, &EvalModel::float(enc.clone()), 16).unwrap();
        let preds: Vec<f64> = task
            .pairs
            .iter()
            .map(|p| {
                let a = enc.embed(&format_query(STS_TEMPLATE, &p.a).unwrap(), 16).unwrap();
                let b = enc.embed(&format_query(STS_TEMPLATE, &p.b).unwrap(), 16).unwrap();
                a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
            })
            .collect();
        let gold: Vec<f64> = task.pairs.iter().map(|p| p.gold).collect();
        tied += (preds.iter().map(|p| p.to_bits()).collect::<BTreeSet<_>>().len() < preds.len()) as usize;
        worst = worst.max((report.metrics["spearman"] - spearman_oracle(&preds, &gold)).abs());
    }
    v.require(
        worst < 1e-12 && tied > 0,
        format!("STS tasks with tied predictions and grades ({tied} with prediction ties), max difference {worst:.1e}"),
    );
    v
}

// --------------------------------------------------------------- fixtures

fn fresh(cfg: &EncoderConfig, seed: u64) -> Checkpoint {
    Checkpoint::new(cfg.clone(), init_params(cfg, seed).unwrap()).unwrap()
}

fn overfit_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        stage: Stage::Prefinetune,
        steps: 300,
        batch_size: Some(16),
        learning_rate: 1e-3,
        seed: SEED,
        ..TrainConfig::default()
    };
    cfg.loss.weights.distill = 0.0;
    cfg
}

fn finetune_cfg(steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        stage: Stage::Finetune,
        steps,
        batch_size: Some(8),
        seed,
        ..TrainConfig::default()
    };
    cfg.loss.weights.distill = 0.0;
    cfg
}

fn recall_at_1(model: &EvalModel, task: &RetrievalTask, dims: &[usize]) -> Vec<f64> {
    mrl_sweep(task, model, dims, 10)
        .unwrap()
        .iter()
        .map(|r| r.metrics["recall@1"])
        .collect()
}

fn float_recall(ckpt: &Checkpoint, task: &RetrievalTask) -> f64 {
    recall_at_1(&EvalModel::float(ckpt.encoder()), task, &[ckpt.config.d_out])[0]
}

fn quant_recall(ckpt: &Checkpoint, scheme: &QuantScheme, task: &RetrievalTask) -> f64 {
    let q = apply_quant_scheme(ckpt, scheme).unwrap();
    let model = EvalModel::from_checkpoint(AnyCheckpoint::Quantized(q)).unwrap();
    recall_at_1(&model, task, &[ckpt.config.d_out])[0]
}

fn schemes() -> [QuantScheme; 3] {
    [
        QuantScheme::int8_per_block(32),
        QuantScheme::int4_per_block(32),
        QuantScheme::mixed_per_channel(),
    ]
}

struct Fixtures {
    synth: SyntheticCorpus,
    corpus: Corpus,
    overfit: TrainOutcome,
    overfit_secs: f64,
    teacher: Checkpoint,
    qat8_scratch: Checkpoint,
    distill: (Checkpoint, Checkpoint),
    qat_finetunes: Vec<Checkpoint>,
    mixed_finetunes: Vec<(String, Checkpoint)>,
}

fn build_fixtures(synth: SyntheticCorpus) -> Fixtures {
    let corpus = synth.corpus();
    let desk = EncoderConfig::desk();
    let ((overfit, overfit_secs), teacher, qat8_scratch) = thread::scope(|s| {
        let a = s.spawn(|| {
            let t = Instant::now();
            let out = train_run(&overfit_cfg(), &corpus, &fresh(&desk, SEED)).unwrap();
            (out, t.elapsed().as_secs_f64())
        });
        let b = s.spawn(|| build_teacher(&corpus, SEED).unwrap());
        let c = s.spawn(|| {
            let cfg = TrainConfig {
                qat: Some(QuantScheme::int8_per_block(32)),
                ..overfit_cfg()
            };
            train_run(&cfg, &corpus, &fresh(&desk, SEED)).unwrap().checkpoint
        });
        (a.join().unwrap(), b.join().unwrap(), c.join().unwrap())
    });

    let base = &overfit.checkpoint;
    let (distill, qat_finetunes, mixed_finetunes) = thread::scope(|s| {
        let d = s.spawn(|| {
            let mut cfg = overfit_cfg();
            cfg.steps = 500;
            cfg.loss.weights = LossWeights {
                contrastive: 0.0,
                spreadout: 0.0,
                distill: 1.0,
            };
            let start = fresh(&desk, SEED + 1);
            let mut t = Teacher::new(teacher.encoder());
            let out = train_with_teacher(&cfg, &corpus, &start, Some(&mut t)).unwrap();
            (start, out.checkpoint)
        });
        let q: Vec<_> = schemes()
            .into_iter()
            .map(|scheme| {
                let corpus = &corpus;
                s.spawn(move || {
                    let cfg = TrainConfig {
                        qat: Some(scheme),
                        ..finetune_cfg(150, SEED)
                    };
                    train_run(&cfg, corpus, base).unwrap().checkpoint
                })
            })
            .collect();
        let m: Vec<_> = (1..=3u64)
            .map(|i| {
                let corpus = &corpus;
                s.spawn(move || {
                    let mixture = sample_dirichlet_mixture(&corpus.tags(), 1.0, i).unwrap();
                    let label = format!("{:?}", mixture.weights());
                    let cfg = TrainConfig {
                        mixture: Some(mixture),
                        ..finetune_cfg(100, SEED + i)
                    };
                    (label, train_run(&cfg, corpus, base).unwrap().checkpoint)
                })
            })
            .collect();
        (
            d.join().unwrap(),
            q.into_iter().map(|h| h.join().unwrap()).collect(),
            m.into_iter().map(|h| h.join().unwrap()).collect(),
        )
    });
    Fixtures {
        synth,
        corpus,
        overfit,
        overfit_secs,
        teacher,
        qat8_scratch,
        distill,
        qat_finetunes,
        mixed_finetunes,
    }
}

// ------------------------------------------------------- criteria 4 to 9

fn criterion_4(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let r = float_recall(&f.overfit.checkpoint, &f.synth.retrieval);
    v.require(r >= 0.95, format!("Recall@1 at d=16 after 300 steps: {r:.4}"));
    v.require(f.overfit_secs < 300.0, format!("training time {:.1}s", f.overfit_secs));

    let trace = &f.overfit.trace;
    let first = trace[0].loss;
    let last = trace[trace.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    v.note(format!(
        "loss {first:.4} at step 0, {last:.4} averaged over the last 10 steps ({:.1}% of initial)",
        100.0 * last / first
    ));
    let windows: Vec<f64> = trace
        .chunks(50)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect();
    let monotone = windows.windows(2).all(|w| w[1] <= w[0]);
    v.note(format!(
        "50-step window means {} ({})",
        windows.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", "),
        if monotone { "non-increasing" } else { "NOT non-increasing" }
    ));
    let teacher = float_recall(&f.teacher, &f.synth.retrieval);
    v.note(format!("teacher Recall@1 on the same task: {teacher:.4}"));
    v
}

fn criterion_5(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let model = EvalModel::float(f.overfit.checkpoint.encoder());
    let r = recall_at_1(&model, &f.synth.retrieval, &[16, 8, 4]);
    v.require(r[1] >= 0.80, format!("Recall@1 at d=8: {:.4}", r[1]));
    v.require(r[2] >= 0.80, format!("Recall@1 at d=4: {:.4}", r[2]));
    v.require(r[0] >= r[2], format!("full {:.4} >= quarter {:.4}", r[0], r[2]));
    v
}

fn criterion_6(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let mut texts = BTreeSet::new();
    for e in f.corpus.examples() {
        texts.insert(e.formatted_query().unwrap());
        texts.insert(e.formatted_positive().unwrap());
        if let Some(n) = e.formatted_negative().unwrap() {
            texts.insert(n);
        }
    }
    let teacher = f.teacher.encoder();
    let distance = |student: &Checkpoint| {
        let enc = student.encoder();
        texts
            .iter()
            .map(|t| {
                let (s, te) = (enc.embed(t, 16).unwrap(), teacher.embed(t, 16).unwrap());
                s.values().iter().zip(te.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / texts.len() as f64
    };
    let (before, after) = (distance(&f.distill.0), distance(&f.distill.1));
    let drop = 1.0 - after / before;
    v.require(
        drop >= 0.5,
        format!("mean squared distance {before:.4} -> {after:.4} over {} texts ({:.1}% decrease)", texts.len(), 100.0 * drop),
    );
    v
}

fn criterion_7(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let desk = EncoderConfig::desk();
    let c: Vec<Checkpoint> = (0..4).map(|i| fresh(&desk, 50 + i)).collect();
    let three = soup_checkpoints(&c[..3]).unwrap();
    let mut worst: f64 = 0.0;
    for (name, t) in three.params.iter() {
        let src: Vec<&[f64]> = c[..3].iter().map(|x| x.params.get(name).unwrap().data()).collect();
        for (i, &s) in t.data().iter().enumerate() {
            worst = worst.max((s - (src[0][i] + src[1][i] + src[2][i]) / 3.0).abs());
        }
    }
    v.require(worst <= 1e-12, format!("three-way soup vs direct mean: max difference {worst:.1e}"));

    let same = soup_checkpoints(&[c[0].clone(), c[0].clone(), c[0].clone()]).unwrap();
    v.require(same.params == c[0].params, "soup of identical checkpoints is bit-identical".to_string());

    let reordered = soup_checkpoints(&[c[2].clone(), c[0].clone(), c[1].clone()]).unwrap();
    v.require(reordered.params == three.params, "input order does not change the soup".to_string());

    let ab = soup_checkpoints(&c[..2]).unwrap();
    let cd = soup_checkpoints(&c[2..]).unwrap();
    let nested = soup_checkpoints(&[ab, cd]).unwrap();
    let flat = soup_checkpoints(&c).unwrap();
    let gap = nested
        .params
        .iter()
        .map(|(n, t)| t.max_abs_diff(flat.params.get(n).unwrap()))
        .fold(0.0, f64::max);
    v.require(gap <= 1e-12, format!("soup of pair soups vs four-way soup: {gap:.1e}"));

    let ingredients: Vec<Checkpoint> = f.mixed_finetunes.iter().map(|(_, c)| c.clone()).collect();
    let souped = soup_checkpoints(&ingredients);
    v.require(souped.is_ok(), "soup of three differently mixed finetunes builds".to_string());
    let mut scores = Vec::new();
    for (label, c) in &f.mixed_finetunes {
        let r = float_recall(c, &f.synth.retrieval);
        scores.push(r);
        v.note(format!("ingredient {label}: Recall@1 {r:.4}"));
    }
    if let Ok(s) = souped {
        let r = float_recall(&s, &f.synth.retrieval);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        v.note(format!("soup Recall@1 {r:.4}; ingredient mean {mean:.4} (gain {:+.4})", r - mean));
    }
    v
}

/// Largest `|dq(q(v)) − v| − scale/2` over every quantized element.
fn roundtrip_excess(ckpt: &Checkpoint, scheme: &QuantScheme) -> f64 {
    let q = apply_quant_scheme(ckpt, scheme).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for (name, stored) in &q.tensors {
        let StoredTensor::Quantized(qt) = stored else { continue };
        let orig = ckpt.params.get(name).unwrap();
        let again = QuantizedTensor::quantize(orig, qt.rule).unwrap();
        assert_eq!(&again, qt);
        let dq = qt.dequantize();
        for ((x, d), s) in orig.data().iter().zip(dq.data()).zip(qt.element_scales()) {
            worst = worst.max((x - d).abs() - s as f64 / 2.0);
        }
    }
    worst
}

fn criterion_8(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let task = &f.synth.retrieval;
    let base = &f.overfit.checkpoint;
    let float = float_recall(base, task);
    v.note(format!("unquantized Recall@1 {float:.4}"));
    let tags = ["int8 per-block", "int4 per-block", "mixed per-channel"];
    let qat: Vec<f64> = schemes()
        .iter()
        .zip(&f.qat_finetunes)
        .map(|(s, c)| quant_recall(c, s, task))
        .collect();
    for (i, s) in schemes().iter().enumerate() {
        let post_hoc = quant_recall(base, s, task);
        v.note(format!(
            "{}: post-hoc {post_hoc:.4}, after quantization-aware finetuning {:.4}",
            tags[i], qat[i]
        ));
    }
    v.require(float - qat[0] <= 0.05, format!("int8 drop {:.4} <= 0.05", float - qat[0]));
    v.require(float - qat[1] <= 0.10, format!("int4 drop {:.4} <= 0.10", float - qat[1]));
    let (lo, hi) = (qat[0].min(qat[1]), qat[0].max(qat[1]));
    v.require(
        (lo..=hi).contains(&qat[2]),
        format!("mixed {:.4} within [{lo:.4}, {hi:.4}]", qat[2]),
    );

    let mut worst = f64::NEG_INFINITY;
    for c in std::iter::once(base).chain(&f.qat_finetunes) {
        for s in schemes() {
            worst = worst.max(roundtrip_excess(c, &s));
        }
    }
    v.require(worst <= 0.0, format!("max (|dq(q(v)) - v| - scale/2) over all tensors: {worst:.2e}"));
    v
}

fn criterion_9(f: &Fixtures) -> Verdict {
    let mut v = Verdict::new();
    let task = &f.synth.retrieval;
    let base = &f.overfit.checkpoint;
    let mut texts: Vec<String> = task
        .queries
        .iter()
        .map(|q| format_query(RETRIEVAL_QUERY_TEMPLATE, &q.text).unwrap())
        .collect();
    texts.extend(task.documents.iter().map(|d| format_passage(d.title.as_deref(), &d.text)));
    for (scheme, name) in schemes().iter().zip(["int8", "int4", "mixed"]) {
        let stored = apply_quant_scheme(base, scheme).unwrap().dequantize().unwrap();
        let mut differing = 0;
        for t in &texts {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &base.params, true, Some(scheme)).unwrap();
            let out = embed_graph(&mut g, &base.config, &bound, &tokenize(t, base.config.max_seq_len)).unwrap();
            differing += (g.value(out).data() != stored.embed_raw(t).unwrap().as_slice()) as usize;
        }
        v.require(
            differing == 0,
            format!("{name}: training forward vs stored checkpoint, {differing} of {} embeddings differ", texts.len()),
        );
    }
    let int8 = QuantScheme::int8_per_block(32);
    let qat = quant_recall(&f.qat8_scratch, &int8, task);
    let post = quant_recall(base, &int8, task);
    v.require(qat >= post, format!("int8 Recall@1: quantization-aware run {qat:.4}, post-hoc {post:.4}"));
    v
}

// ----------------------------------------------------------- criterion 11

fn criterion_11(synth: &SyntheticCorpus) -> Verdict {
    let mut v = Verdict::new();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth.write(d).unwrap();
    let config = serde_json::json!({
        "stage": "finetune", "steps": 20, "batch_size": 8, "seed": 3,
        "loss": { "weights": { "distill": 0.0 } }
    });
    fs::write(d.join("config.json"), config.to_string()).unwrap();
    fs::write(d.join("texts.jsonl"), "{\"id\":1,\"text\":\"alpha\"}\n{\"id\":2,\"text\":\"beta\"}\n").unwrap();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let run = |args: &[String]| {
        let out = Command::new(env!("CARGO_BIN_EXE_embedkit")).args(args).output().unwrap();
        (out.status.code(), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
    };
    let args = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let twice = |v: &mut Verdict, label: &str, make: &dyn Fn(&str) -> Vec<String>, out: &dyn Fn(&str) -> String| {
        let (c1, s1, e1) = run(&make("1"));
        let (c2, s2, _) = run(&make("2"));
        let same = c1 == Some(0)
            && c2 == Some(0)
            && s1 == s2
            && fs::read(out("1")).ok() == fs::read(out("2")).ok()
            && fs::metadata(out("1")).is_ok();
        v.require(same, format!("{label}: two invocations identical{}", if c1 == Some(0) { String::new() } else { format!(" ({e1})") }));
    };

    twice(
        &mut v,
        "train",
        &|k| args(&["train", "--config", &p("config.json"), "--data", &p("corpus"), "--out", &p(&format!("t{k}.ckpt"))]),
        &|k| p(&format!("t{k}.ckpt")),
    );
    let traces_equal = fs::read(p("t1.ckpt.trace.csv")).ok() == fs::read(p("t2.ckpt.trace.csv")).ok();
    v.require(traces_equal, "train: loss traces identical".to_string());
    twice(
        &mut v,
        "mixtures",
        &|k| {
            args(&[
                "mixtures", "--data", &p("corpus"), "--n", "2", "--seed", "11", "--config", &p("config.json"),
                "--retrieval", &p("retrieval.jsonl"), "--report", &p(&format!("m{k}.json")),
            ])
        },
        &|k| p(&format!("m{k}.json")),
    );
    twice(
        &mut v,
        "quantize",
        &|k| args(&["quantize", "--ckpt", &p("t1.ckpt"), "--scheme", "mixed", "--out", &p(&format!("q{k}.ckpt"))]),
        &|k| p(&format!("q{k}.ckpt")),
    );
    twice(
        &mut v,
        "soup",
        &|k| args(&["soup", "--inputs", &p("t1.ckpt"), &p("t2.ckpt"), "--out", &p(&format!("s{k}.ckpt"))]),
        &|k| p(&format!("s{k}.ckpt")),
    );
    twice(
        &mut v,
        "embed",
        &|k| args(&["embed", "--ckpt", &p("q1.ckpt"), "--input", &p("texts.jsonl"), "--dim", "8", "--out", &p(&format!("e{k}.jsonl"))]),
        &|k| p(&format!("e{k}.jsonl")),
    );
    twice(
        &mut v,
        "eval",
        &|k| {
            args(&[
                "eval", "--ckpt", &p("t1.ckpt"), "--task", "retrieval", "--data", &p("retrieval.jsonl"), "--dims",
                "16,8,4", "--out", &p(&format!("r{k}.json")),
            ])
        },
        &|k| p(&format!("r{k}.json")),
    );
    v
}

// ------------------------------------------------------------------- main

fn report(id: u32, name: &str, v: &Verdict) {
    println!("criterion {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" });
    for n in &v.notes {
        println!("      {n}");
    }
}

fn main() -> ExitCode {
    let synth = make_synthetic_corpus(&SyntheticSpec {
        seed: SEED,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_eq!(synth.examples.len(), 64);
    let mut all = Vec::new();
    let mut run = |id: u32, name: &str, v: Verdict| {
        report(id, name, &v);
        all.push(v.pass);
    };

    run(1, "gradient correctness", criterion_1(&synth));
    run(2, "false-negative mask oracle", criterion_2());
    run(3, "sphere statistic", criterion_3());
    run(10, "metric oracles", criterion_10());

    let started = Instant::now();
    let f = build_fixtures(synth.clone());
    println!("      (training fixtures built in {:.1}s)", started.elapsed().as_secs_f64());
    run(4, "overfit fixture", criterion_4(&f));
    run(5, "nested-dimension trend", criterion_5(&f));
    run(6, "distillation pull", criterion_6(&f));
    run(7, "souping algebra", criterion_7(&f));
    run(8, "quantization quality", criterion_8(&f));
    run(9, "quantization-aware consistency", criterion_9(&f));
    run(11, "determinism", criterion_11(&f.synth));

    let passed = all.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed == all.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
