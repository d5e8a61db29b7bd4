mod commands;
mod config;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Target speech extraction: corpus simulation, staged training,
/// condition-wise evaluation and run comparison.
#[derive(Debug, Parser)]
#[command(name = "lgtse", version)]
pub struct Cli {
    /// TOML file with [simulate], [train] and [eval] sections
    #[arg(long, global = true, env = "LGTSE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Only print warnings and errors
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with its triplet index
    Simulate(SimulateArgs),
    /// Run staged training on a corpus or manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a stub) per condition
    Eval(EvalArgs),
    /// Per-condition deltas between two evaluation reports
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "LGTSE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "LGTSE_SPEAKERS")]
    pub speakers: Option<usize>,
    #[arg(long, env = "LGTSE_UTTS")]
    pub utts: Option<usize>,
    /// Clip duration in seconds
    #[arg(long, env = "LGTSE_DURATION")]
    pub duration: Option<f64>,
    #[arg(long, env = "LGTSE_NOISES")]
    pub noises: Option<usize>,
    #[arg(long)]
    pub train_triplets: Option<usize>,
    #[arg(long)]
    pub test_triplets: Option<usize>,
    #[arg(long, env = "LGTSE_SEED")]
    pub seed: Option<u64>,
    /// 4 speakers, 1 s clips
    #[arg(long)]
    pub tiny: bool,
    /// Replace an existing corpus
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "LGTSE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Libri2Mix-style CSV manifest instead of a simulated corpus
    #[arg(long, env = "LGTSE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "LGTSE_OUT")]
    pub out: Option<PathBuf>,
    /// condition-wise, triplec, triplec-parallel or shuffled
    #[arg(long, env = "LGTSE_MODE")]
    pub mode: Option<String>,
    /// Condition for condition-wise mode
    #[arg(long, env = "LGTSE_CONDITION")]
    pub condition: Option<String>,
    /// Epochs for every stage
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub denoiser_epochs: Option<usize>,
    #[arg(long)]
    pub backbone_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long, env = "LGTSE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "LGTSE_LR")]
    pub lr: Option<f64>,
    /// Consistency weight
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub max_steps_per_stage: Option<usize>,
    #[arg(long, env = "LGTSE_SEED")]
    pub seed: Option<u64>,
    /// Small model and short schedule
    #[arg(long)]
    pub tiny: bool,
    /// Continue from the run directory's checkpoint
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Discard an existing run in the output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory, or a training run directory containing one
    #[arg(long, env = "LGTSE_CHECKPOINT", conflicts_with = "stub")]
    pub checkpoint: Option<PathBuf>,
    /// identity or perfect
    #[arg(long)]
    pub stub: Option<String>,
    #[arg(long, env = "LGTSE_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, env = "LGTSE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// train or test
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated subset of 1spk+noise, 2spk, 2spk+noise
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<String>>,
    #[arg(long, env = "LGTSE_OUT")]
    pub out: Option<PathBuf>,
    /// Comma-separated report formats: markdown, csv, text
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
    /// Skip the denoiser probe
    #[arg(long)]
    pub no_probe: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Evaluation directory or report.json
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    /// Also write the delta table here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 1 usage, 2 data, 3 training.
fn exit_code(err: &anyhow::Error) -> u8 {
    use lgtse_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Usage(_) | E::Mode(_) | E::Config(_)) => 1,
        Some(E::Training(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
