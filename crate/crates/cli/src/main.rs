mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentprobe::{DimSelection, ModelKind};

/// Train, evaluate, inspect, probe and serve word-embedding autoencoders.
#[derive(Parser)]
#[command(name = "latentprobe", version)]
struct Cli {
    /// Print machine-readable JSON instead of tables
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an AE or beta-VAE on a .vec file
    Train(TrainArgs),
    /// Score a checkpoint (or the raw vectors) on similarity and analogy data
    Eval(EvalArgs),
    /// Print per-dimension statistics sorted by entropy
    Dims(InspectArgs),
    /// Probe latent dimensions with a word pair
    Probe(ProbeArgs),
    /// Serve the JSON API for one or more checkpoints
    Serve(ServeArgs),
}

#[derive(Args)]
struct VectorArgs {
    /// Word vectors in .vec text format
    #[arg(long)]
    embeddings: PathBuf,
    /// Keep only the first N words
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    vectors: VectorArgs,
    /// Model kind: ae or bvae
    #[arg(long, default_value = "bvae")]
    model: ModelKind,
    /// KL weight; ignored for ae [default: 1e-5]
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 350)]
    latent_dim: usize,
    /// Hidden layer widths, comma separated; empty for a linear model
    #[arg(long, default_value = "400", value_delimiter = ',')]
    hidden: Vec<String>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Checkpoint path; the trace goes to <out>.trace.jsonl
    #[arg(long, default_value = "model.lpck")]
    out: PathBuf,
    /// Word-similarity pairs (tab separated) for per-epoch telemetry
    #[arg(long)]
    semeval: Option<PathBuf>,
    /// Analogy questions (Google format) for per-epoch telemetry
    #[arg(long)]
    analogy: Option<PathBuf>,
    /// Analogy questions sampled per epoch
    #[arg(long, default_value_t = latentprobe::dims::DEFAULT_TELEMETRY_ANALOGIES)]
    analogy_sample: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    vectors: VectorArgs,
    /// Checkpoint to evaluate; required unless --raw
    #[arg(long, required_unless_present = "raw")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the raw vectors instead of a checkpoint
    #[arg(long, conflicts_with = "checkpoint")]
    raw: bool,
    #[arg(long, required_unless_present = "analogy")]
    semeval: Option<PathBuf>,
    #[arg(long)]
    analogy: Option<PathBuf>,
    /// Latent dims to use: all or useful
    #[arg(long, default_value = "all")]
    dims: DimSelection,
    /// Restrict analogy answers to the first N words
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    vectors: VectorArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    inspect: InspectArgs,
    /// Word pair as w1,w2
    #[arg(long)]
    pair: String,
    /// Probe one dimension; all useful dims if omitted
    #[arg(long)]
    dim: Option<usize>,
    /// Perturbation samples per word
    #[arg(long, default_value_t = latentprobe::probe::DEFAULT_PROBE_SAMPLES)]
    samples: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Word vectors shared by all checkpoints
    #[command(flatten)]
    vectors: VectorArgs,
    /// Checkpoint to serve, id = file stem (repeatable)
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, env = "LATENTPROBE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

/// Exit code 1 covers bad input and data errors, 2 internal failures.
pub enum Failure {
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Command::Train(args) => commands::train(args, json),
        Command::Eval(args) => commands::eval(args),
        Command::Dims(args) => commands::dims(args, json),
        Command::Probe(args) => commands::probe(args, json),
        Command::Serve(args) => commands::serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
