//! Writes a synthetic corpus with its retrieval and STS tasks.
//!
//! cargo run --example synthetic -- OUT_DIR [SEED]

use embedkit::teacherkit::{make_synthetic_corpus, SyntheticSpec};

fn main() -> embedkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next() else {
        eprintln!("usage: synthetic OUT_DIR [SEED]");
        std::process::exit(1);
    };
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let synth = make_synthetic_corpus(&spec)?;
    synth.write(&out)?;
    println!("{} examples written to {out}", synth.examples.len());
    Ok(())
}
