//! `amg`: generate data, train, evaluate, inspect graphs, run property suites.
//!
//! Configuration precedence: built-in defaults, then `--config <file>`, then
//! command-line flags. The resolved configuration is written as
//! `config.toml` into every output directory.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure
//! (including failed verification).

mod config;
mod error;
mod eval;
mod generate;
mod inspect;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ModelKind, Precision};

#[derive(Parser, Debug)]
#[command(name = "amg", version, about = "Multi-graph neural operator on a synthetic Poisson benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream the command uses.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Poisson dataset (train/val/test splits plus manifest).
    Generate(GenerateArgs),
    /// Train the AMG model or the MLP baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Dump the layer-0 graphs built for one sample.
    InspectGraph(InspectArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Points sampled per mesh.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Oracle grid intervals per side.
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Gaussian bumps in each source term.
    #[arg(long)]
    pub gaussians: Option<usize>,
    /// Replace the dataset in a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory (metrics, checkpoints, resolved config).
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory written by `amg generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Continue from this checkpoint directory; architecture, normaliser and
    /// schedule come from the checkpoint (`--epochs` may extend the run).
    #[arg(
        long,
        value_name = "CHECKPOINT",
        conflicts_with_all = ["config", "seed", "model", "lr", "batch_size", "precision"]
    )]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for the graph dump.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Use a trained AMG checkpoint instead of a freshly initialised model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Optional directory for the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated suite names (default: all).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Deliberate fault to confirm the suites catch it (perturb-gradient).
    #[arg(long)]
    pub inject: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::InspectGraph(a) => inspect::run(a),
        Command::Verify(a) => verify::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
