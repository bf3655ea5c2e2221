//! `lace`: generate synthetic GNSS sessions, train covariance models and
//! evaluate them.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for
//! numerical failures such as a diverging training run.

mod commands;
mod dataset;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lace_core::learn::Mode;

#[derive(Parser)]
#[command(name = "lace", version, about = "Learned GNSS measurement-covariance dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/eval session files from a synthetic world.
    Generate(GenerateArgs),
    /// Fit a LACE or one-shot model on a dataset's training split.
    Train(TrainArgs),
    /// Score checkpoints and the calibrated baselines on the eval split.
    Eval(EvalArgs),
    /// Propagate random initial covariances through a trained model.
    Converge(ConvergeArgs),
    /// Re-propagate a trained Q sequence under fixed eigenvalues.
    LambdaSweep(LambdaSweepArgs),
    /// Run the Kalman filter with one covariance model.
    Ekf(EkfArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// World config (TOML); the built-in default world when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub laps: usize,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of laps written to the eval split.
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Training config (TOML); defaults for every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = lace_core::dynamics::DEFAULT_R_MAX)]
    pub r_max: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConvergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub inits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index into the eval split.
    #[arg(long, default_value_t = 0)]
    pub session: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct LambdaSweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_values_t = [-2.0, -0.7, -0.3, -0.2, -0.1]
    )]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EkfArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `oracle`, `constant`, `constant:<c>`, `bubble` or a checkpoint path.
    #[arg(long)]
    pub model: String,
    /// Acceleration density, m²/s³; tuned on open sky when omitted.
    #[arg(long)]
    pub accel_psd: Option<f64>,
    /// Meters past a bridge that still count as its zone.
    #[arg(long, default_value_t = 50.0)]
    pub exit_margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: lace_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Converge(a) => commands::converge(&a),
        Command::LambdaSweep(a) => commands::lambda_sweep(&a),
        Command::Ekf(a) => commands::ekf(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
