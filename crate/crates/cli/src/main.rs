use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use yldcvt::model::ModelPreset;
use yldcvt::train::Precision;

mod artifacts;
mod eval;
mod gradcheck;
mod synth;
mod train;

pub const BUILD_ID: &str = env!("YLDCVT_BUILD_ID");

#[derive(Parser)]
#[command(name = "yldcvt", version = BUILD_ID, about = "Crop yield regression with convolutional vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic histogram dataset.
    Synth(SynthArgs),
    /// Train and evaluate one model per test year and run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every sample of one year.
    Eval(EvalArgs),
    /// Finite-difference check of all model gradients in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise share of the yield variance, in [0, 1].
    #[arg(long, value_parser = parse_unit_interval)]
    pub sigma_noise: Option<f64>,
    /// Inclusive year range such as 2003-2021.
    #[arg(long, value_parser = parse_year_range)]
    pub years: Option<(i32, i32)>,
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset, required_unless_present = "manifest")]
    pub model: Option<ModelPreset>,
    /// Held-out year; repeat for several.
    #[arg(long = "test-year", required_unless_present = "manifest")]
    pub test_years: Vec<i32>,
    /// Stride of the key and value projections.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub kv_stride: Option<u8>,
    /// Independent runs per test year.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: Option<u64>,
    /// Base seed for splits, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Keep only the first 19 intervals of every season.
    #[arg(long)]
    pub in_year: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Arithmetic used for training (evaluation is always 64-bit).
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Print the resolved manifest and exit without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Replay the configuration recorded in a previous manifest.json.
    #[arg(long, conflicts_with_all = ["model", "test_years", "kv_stride", "runs", "seed", "in_year", "epochs", "lr", "batch_size", "precision"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train` (the .yldh file; its .json sidecar must sit next to it).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_year: i32,
    /// Also write the metrics row to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_preset, default_value = "tiny")]
    pub model: ModelPreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries checked per parameter tensor; 0 checks every entry.
    #[arg(long, default_value_t = 128)]
    pub max_entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scales analytic gradients before comparison.
    #[arg(long, hide = true)]
    pub corrupt_gradient: Option<f64>,
}

/// Bad invocation detected after parsing; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check ran and failed; exits with status 1 without an error banner.
#[derive(Debug)]
pub struct CheckFailed;

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn parse_preset(s: &str) -> Result<ModelPreset, String> {
    s.parse().map_err(|e: yldcvt::Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: yldcvt::Error| e.to_string())
}

fn parse_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_year_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("expected FIRST-LAST, got {s:?}"))?;
    let a: i32 = a.trim().parse().map_err(|e| format!("bad first year: {e}"))?;
    let b: i32 = b.trim().parse().map_err(|e| format!("bad last year: {e}"))?;
    if a > b {
        return Err(format!("first year {a} is after last year {b}"));
    }
    Ok((a, b))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("YLDCVT_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(UsageError(format!("YLDCVT_THREADS must be a positive integer, got {v:?}")).into()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
