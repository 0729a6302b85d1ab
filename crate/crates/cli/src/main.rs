mod commands;
mod json;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use embedkit::corpus::Stage;

/// Train, evaluate, soup and quantize small dual-encoder embedding models.
#[derive(Debug, Parser)]
#[command(name = "embedkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Prefinetune,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Prefinetune => Stage::Prefinetune,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Retrieval,
    Sts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    #[value(name = "int4-block")]
    Int4Block,
    #[value(name = "int8-block")]
    Int8Block,
    Mixed,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a checkpoint on a directory of JSON-lines corpus files.
    Train {
        /// Training configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the stage given in the configuration.
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Checkpoint to continue from; a fresh model is built otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Embed `{"id", "text"}` lines; texts are used verbatim.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output width; d_out or one of the configured MRL dimensions.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a retrieval or STS task file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Comma-separated prefix widths; d_out when omitted.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average the parameters of two or more checkpoints.
    Soup {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Store a float checkpoint under a quantization scheme.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = embedkit::quant::DEFAULT_BLOCK_SIZE)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per candidate mixture and rank them.
    Mixtures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        concentration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Retrieval task scored by MRR@10.
        #[arg(long)]
        retrieval: Option<PathBuf>,
        /// STS task scored by Spearman correlation.
        #[arg(long)]
        sts: Option<PathBuf>,
    },
}

/// A failure with its exit status: 1 for bad input or configuration, 2 for
/// errors while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<embedkit::Error> for Failure {
    fn from(e: embedkit::Error) -> Self {
        if e.is_usage_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
