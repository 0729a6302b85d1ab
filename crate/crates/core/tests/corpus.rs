use std::collections::BTreeMap;
use std::fs;

use embedkit::corpus::{
    detokenize, load_examples, make_batches, sample_dirichlet_mixture, tokenize, write_examples,
    Corpus, Mixture, Stage, TrainingExample, BOS_ID, PAD_ID,
};
use embedkit::Error;
use proptest::prelude::*;

fn example(dataset: &str, i: usize) -> TrainingExample {
    TrainingExample {
        dataset: dataset.to_string(),
        task_query: "task: search result | query: {content}".to_string(),
        task_passage: "title: {title} | text: {content}".to_string(),
        query: format!("{dataset} query {i}"),
        positive: format!("{dataset} passage {i}"),
        negative: Some(format!("{dataset} other {i}")),
        title: (i % 2 == 0).then(|| format!("t{i}")),
    }
}

fn corpus(sizes: &[(&str, usize)]) -> Corpus {
    Corpus::new(
        sizes
            .iter()
            .flat_map(|&(tag, n)| (0..n).map(move |i| example(tag, i)))
            .collect(),
    )
}

fn mixture(pairs: &[(&str, f64)]) -> Mixture {
    Mixture::new(pairs.iter().map(|&(t, w)| (t.to_string(), w)).collect()).unwrap()
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize("", 4).ids(), &[BOS_ID, PAD_ID, PAD_ID, PAD_ID]);
    assert_eq!(tokenize("A", 4).ids(), &[BOS_ID, 65, PAD_ID, PAD_ID]);
    let long = tokenize(&"x".repeat(600), 512);
    assert_eq!(long.len(), 512);
    assert!(!long.ids().contains(&PAD_ID));
}

#[test]
fn file_round_trip_keeps_order_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let mut rows: Vec<TrainingExample> = (0..3).map(|i| example("A", i)).collect();
    rows.push(rows[0].clone());
    write_examples(&path, &rows).unwrap();
    assert_eq!(load_examples(&path).unwrap(), rows);
}

#[test]
fn load_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = serde_json::to_string(&example("A", 0)).unwrap();
    let missing = r#"{"dataset":"A","task_query":"{content}","task_passage":"{content}","positive":"p"}"#;
    fs::write(&path, format!("{good}\n{missing}\n")).unwrap();
    match load_examples(&path) {
        Err(Error::Schema { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("query"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&path, format!("{good}\n{good}\n{{not json\n")).unwrap();
    assert!(matches!(load_examples(&path), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn dirichlet_mean_is_uniform() {
    let tags = ["a", "b", "c"];
    let mut sums = [0.0; 3];
    let n = 10_000;
    for seed in 0..n {
        let m = sample_dirichlet_mixture(&tags, 1.0, seed).unwrap();
        for (s, t) in sums.iter_mut().zip(tags) {
            *s += m.weight(t);
        }
    }
    for s in sums {
        assert!((s / n as f64 - 1.0 / 3.0).abs() < 0.01, "{}", s / n as f64);
    }
    assert_eq!(sample_dirichlet_mixture(&["only"], 0.3, 1).unwrap().weight("only"), 1.0);
    assert!(sample_dirichlet_mixture::<&str>(&[], 1.0, 1).is_err());
}

#[test]
fn batch_frequency_follows_mixture() {
    let c = corpus(&[("A", 20), ("B", 20)]);
    let stream = make_batches(&c, &mixture(&[("A", 0.7), ("B", 0.3)]), 4, Stage::Finetune, 17).unwrap();
    let a = stream.take(1000).filter(|b| b.dataset == "A").count();
    assert!((a as f64 / 1000.0 - 0.7).abs() < 0.05, "{a}");

    let only_a = make_batches(&c, &mixture(&[("A", 1.0)]), 4, Stage::Finetune, 3).unwrap();
    assert!(only_a.take(200).all(|b| b.dataset == "A"));
}

#[test]
fn batches_never_mix_datasets() {
    let c = corpus(&[("A", 9), ("B", 13), ("C", 8)]);
    let m = mixture(&[("A", 0.2), ("B", 0.5), ("C", 0.3)]);
    for b in make_batches(&c, &m, 8, Stage::Finetune, 5).unwrap().take(10_000) {
        assert_eq!(b.examples.len(), 8);
        assert!(b.examples.iter().all(|e| e.dataset == b.dataset));
    }
}

#[test]
fn streams_are_seeded_and_prefinetune_strips_negatives() {
    let c = corpus(&[("A", 10), ("B", 10)]);
    let m = mixture(&[("A", 0.5), ("B", 0.5)]);
    let run = |seed| make_batches(&c, &m, 4, Stage::Finetune, seed).unwrap().take(50).collect::<Vec<_>>();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let pre = make_batches(&c, &m, 4, Stage::Prefinetune, 1).unwrap();
    assert!(pre.take(50).all(|b| b.examples.iter().all(|e| e.negative.is_none())));
    assert!(matches!(make_batches(&c, &m, 11, Stage::Finetune, 1), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..100)) {
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let seq = tokenize(&text, text.len() + 1);
        prop_assert_eq!(detokenize(&seq), text.as_bytes());
    }

    #[test]
    fn dirichlet_draws_lie_on_simplex(seed in any::<u64>(), conc in 0.05f64..20.0, n in 1usize..8) {
        let tags: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let m = sample_dirichlet_mixture(&tags, conc, seed).unwrap();
        let w: BTreeMap<_, _> = m.weights().clone();
        prop_assert!(w.values().all(|&x| x >= 0.0));
        prop_assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(m, sample_dirichlet_mixture(&tags, conc, seed).unwrap());
    }
}
