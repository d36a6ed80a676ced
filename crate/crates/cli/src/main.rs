//! `tvc`: world generation, training, evaluation, ablation and plot-data
//! export for the synthetic navigation benchmark.

mod artifacts;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvc_core::evalkit::Variant;
use tvc_core::objectives::Switches;
use tvc_core::trainer::TrainError;
use tvc_core::world::{Split, WorldError};

/// Error classes with a dedicated exit code, attached to errors as context.
/// Divergence (exit 3) is recognized from the trainer's own error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Config,
    Artifact,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Config => 2,
            Failure::Artifact => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "invalid configuration",
            Failure::Artifact => "artifact mismatch",
        })
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    // Context layers are only reachable through the top-level downcast.
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.code();
    }
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code();
        }
        match cause.downcast_ref::<TrainError>() {
            Some(TrainError::DivergenceDetected { .. }) => return 3,
            Some(TrainError::CheckpointMismatch(_)) => return 4,
            Some(TrainError::Config(_)) | Some(TrainError::World(WorldError::InvalidConfig(_))) => return 2,
            _ => {}
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "tvc", version, about = "Navigation agents with test-time visual consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and episodes.
    World(WorldArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate checkpoints, optionally with test-time adaptation.
    Eval(EvalArgs),
    /// Train and evaluate every requested switch combination.
    Ablate(AblateArgs),
    /// Write raw data series for plots.
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iters=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct WorldArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory written by `tvc world`.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Objective families, e.g. `ml` or `ml,cl_il,cl_rl`.
    #[arg(long)]
    pub switches: Option<Switches>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint (default: `<out>/checkpoint.json`).
    #[arg(long, num_args = 0..=1, value_name = "CHECKPOINT")]
    pub resume: Option<Option<PathBuf>>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Run config; defaults to `config.toml` next to the first checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub world: PathBuf,
    /// One checkpoint per seed, or a single one reused for every seed.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "val_seen,val_unseen")]
    pub split: Vec<Split>,
    #[arg(long, default_value = "tta")]
    pub variant: Variant,
    /// Adaptation steps per episode (overrides `tta.iters`).
    #[arg(long)]
    pub tta_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub world: PathBuf,
    /// `full` for every non-empty combination, or switch lists such as `ml,cl_il`. Repeatable.
    #[arg(long, default_value = "full")]
    pub grid: Vec<String>,
    #[arg(long, default_value = "nnc")]
    pub variant: Variant,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum ExportCommand {
    /// Entropy of the adaptation views per adaptation step.
    Entropy {
        /// `trajectories.jsonl` written by `tvc eval`.
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Node coordinates of agent and reference paths.
    Birdview {
        #[arg(long)]
        trajectories: PathBuf,
        /// Restrict to these episode ids.
        #[arg(long, value_delimiter = ',')]
        episode: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate on unseen scenes against the size of the style offset.
    /// Builds a world and trains one model per seed for every value.
    Shift {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        shifts: Vec<f64>,
        #[arg(long, default_value = "nnc")]
        variant: Variant,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::World(a) => commands::world(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Export(c) => commands::export(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
