//! `dsqn`: train, evaluate and analyse deep spiking Q-networks.

mod analyze;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "dsqn", version, about = "Deep spiking Q-networks on desk-scale environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent and write metrics, checkpoints and a config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the mean and std of its returns.
    Eval(EvalArgs),
    /// Numerical analyses, one CSV each.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Tidy CSVs of learning curves, gradient norms and thresholds from a run.
    Plotdata(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// dsqn, dtsqn or datsqn.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Several seeds run in parallel, e.g. `1..5` or `1,3,7`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Make the thresholds learnable: v_th_p, plus v_th_n for datsqn.
    #[arg(long)]
    pub trainable_threshold: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Simulation window T.
    #[arg(long)]
    pub window: Option<usize>,
    /// atan, sigmoid or ste.
    #[arg(long)]
    pub surrogate: Option<String>,
    /// Output root; one directory per seed is created below it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the environment recorded in the checkpoint.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for eval.csv; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Binary vs ternary spike entropy over a range of firing rates.
    Entropy(analyze::EntropyArgs),
    /// Spike probabilities and expected surrogate gradients under a Gaussian membrane.
    Gradmc(analyze::GradArgs),
    /// Subthreshold membrane statistics against their closed forms.
    Membrane(analyze::MembraneArgs),
    /// Spike-Jacobian isometry per layer.
    Isometry(analyze::NetArgs),
    /// Positive vs negative spike counts per layer or region.
    Balance(analyze::BalanceArgs),
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub run_dir: PathBuf,
    /// Moving-average window, in episodes.
    #[arg(long, default_value_t = 100)]
    pub smooth: usize,
    /// Defaults to `<run_dir>/plots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run::train(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Analyze(a) => analyze::run(&a),
        Command::Plotdata(a) => run::plotdata(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
