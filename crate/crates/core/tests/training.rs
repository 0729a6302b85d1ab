use std::collections::BTreeMap;

use embedkit::corpus::{tokenize, Mixture, Stage};
use embedkit::encoder::{bind_params, embed_graph};
use embedkit::losses::LossWeights;
use embedkit::quant::{apply_quant_scheme, fake_quant};
use embedkit::teacherkit::{make_synthetic_corpus, SyntheticSpec};
use embedkit::trainer::{mixture_search, train_run, train_with_teacher, write_trace, Teacher, TrainConfig};
use embedkit::{Checkpoint, Encoder, EncoderConfig, Error, Graph, QuantScheme};

fn small_cfg(stage: Stage, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        stage,
        steps,
        batch_size: Some(8),
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.loss.weights.distill = 0.0;
    cfg
}

fn fresh(seed: u64) -> Checkpoint {
    let enc = Encoder::init(EncoderConfig::desk(), seed).unwrap();
    Checkpoint::new(enc.config, enc.params).unwrap()
}

#[test]
fn runs_are_reproducible() {
    let corpus = make_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus();
    let cfg = small_cfg(Stage::Finetune, 4);
    let a = train_run(&cfg, &corpus, &fresh(1)).unwrap();
    let b = train_run(&cfg, &corpus, &fresh(1)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.trace, b.trace);
    assert_ne!(a.checkpoint.params, fresh(1).params);
    let c = train_run(&TrainConfig { seed: 6, ..cfg }, &corpus, &fresh(1)).unwrap();
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn stages_differ_in_negative_use() {
    let corpus = make_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus();
    let pre = train_run(&small_cfg(Stage::Prefinetune, 3), &corpus, &fresh(0)).unwrap();
    assert_eq!(pre.negative_terms, 0);
    let fine = train_run(&small_cfg(Stage::Finetune, 3), &corpus, &fresh(0)).unwrap();
    // Three steps, one negative term per prefix length.
    assert_eq!(fine.negative_terms, 3 * 3);
    assert!(pre.trace.iter().all(|r| r.l_d == 0.0 && r.loss.is_finite()));
}

#[test]
fn invalid_runs_are_rejected() {
    let corpus = make_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus();
    let zero = small_cfg(Stage::Finetune, 0);
    assert!(matches!(train_run(&zero, &corpus, &fresh(0)), Err(Error::Config(_))));

    let mut frozen = fresh(0);
    frozen.frozen = true;
    assert!(train_run(&small_cfg(Stage::Finetune, 1), &corpus, &frozen).is_err());

    let mut wants_teacher = small_cfg(Stage::Finetune, 1);
    wants_teacher.loss.weights = LossWeights::default();
    assert!(matches!(train_run(&wants_teacher, &corpus, &fresh(0)), Err(Error::Config(_))));
}

#[test]
fn distillation_uses_the_teacher() {
    let corpus = make_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus();
    let mut cfg = small_cfg(Stage::Finetune, 2);
    cfg.loss.weights = LossWeights {
        contrastive: 0.0,
        spreadout: 0.0,
        distill: 1.0,
    };
    let mut teacher = Teacher::new(Encoder::init(EncoderConfig::teacher(), 3).unwrap());
    let out = train_with_teacher(&cfg, &corpus, &fresh(0), Some(&mut teacher)).unwrap();
    assert!(out.trace.iter().all(|r| r.l_d > 0.0 && r.loss == r.l_d));
}

#[test]
fn trace_file_layout() {
    let corpus = make_synthetic_corpus(&SyntheticSpec::default()).unwrap().corpus();
    let out = train_run(&small_cfg(Stage::Prefinetune, 2), &corpus, &fresh(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace(&path, &out.trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,l_c,l_s,l_d");
    assert_eq!(lines.len(), 3);
    let loss: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(loss, out.trace[0].loss);
}

#[test]
fn fake_quant_forward_matches_quantized_checkpoint() {
    let ckpt = fresh(12);
    let text = "task: search result | query: a quantized forward pass";
    for scheme in [
        QuantScheme::int4_per_block(32),
        QuantScheme::int8_per_block(32),
        QuantScheme::mixed_per_channel(),
    ] {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &ckpt.params, true, Some(&scheme)).unwrap();
        let out = embed_graph(&mut g, &ckpt.config, &bound, &tokenize(text, 64)).unwrap();
        let training = g.value(out).data().to_vec();

        let stored = apply_quant_scheme(&ckpt, &scheme).unwrap().dequantize().unwrap();
        assert_eq!(training, stored.embed_raw(text).unwrap(), "{}", scheme.tag());

        let mut fq = ckpt.params.clone();
        for (name, t) in fq.iter_mut() {
            *t = fake_quant(name, t, &scheme).unwrap();
        }
        assert_eq!(fq, stored.params);
    }
}

#[test]
fn mixture_search_ranks_by_eval() {
    let synth = make_synthetic_corpus(&SyntheticSpec::default()).unwrap();
    let corpus = synth.corpus();
    let cfg = small_cfg(Stage::Finetune, 1);
    let seed_mix = Mixture::uniform(&corpus.tags()).unwrap();
    let score_a = |m: &Mixture, _: &Checkpoint| {
        Ok(BTreeMap::from([("a".to_string(), m.weight("synth-0"))]))
    };

    let only_seed = mixture_search(&cfg, &corpus, &fresh(0), &seed_mix, 0, 1.0, 3, score_a).unwrap();
    assert_eq!(only_seed.candidates.len(), 1);
    assert_eq!(only_seed.candidates[0].weights, seed_mix);

    let run = || mixture_search(&cfg, &corpus, &fresh(0), &seed_mix, 2, 1.0, 3, score_a).unwrap();
    let r = run();
    assert_eq!(r.candidates.len(), 3);
    let weights: Vec<f64> = r.candidates.iter().map(|c| c.weights.weight("synth-0")).collect();
    assert!(weights.windows(2).all(|w| w[0] >= w[1]), "{weights:?}");
    assert_eq!(r, run());
}
