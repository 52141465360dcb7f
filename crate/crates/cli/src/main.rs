//! `motionflow` command-line harness.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motionflow::Error;

#[derive(Parser, Debug)]
#[command(
    name = "motionflow",
    version,
    about = "Conditional flow matching for motion latents"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(commands::GenDataArgs),
    /// Train a predictor.
    Train(commands::TrainArgs),
    /// Generate a latent sequence.
    Sample(commands::SampleArgs),
    /// Shift one coefficient of every frame of a sequence.
    Edit(commands::EditArgs),
    /// Evaluate over a list of values of one setting.
    Sweep(commands::SweepArgs),
    /// Evaluate a checkpoint on held-out clips.
    Eval(commands::EvalArgs),
    /// Summarize any file this tool writes.
    Inspect(commands::InspectArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::CheckpointMismatch(_) | Error::Index { .. } => {
            2
        }
        Error::Numerical { .. } | Error::Degenerate(_) | Error::State(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
