//! `nmsparse` command-line driver.
//!
//! Exit codes: 0 success, 1 malformed or mismatched input, 2 invalid
//! configuration or arguments, 3 numerical failure.

mod analyze;
mod eval;
mod prune;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmsparse::{DType, Error, PatternShape};

#[derive(Parser)]
#[command(name = "nmsparse", version, about = "N:M semi-structured pruning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune DWT1 weight files into NMS1 encodings.
    Prune(PruneArgs),
    /// Pattern counts, metadata cost and the stacked 2:4 superset check.
    Analyze(AnalyzeArgs),
    /// Compare an NMS1 file against its dense original on calibration data.
    Eval(EvalArgs),
    /// Write a synthetic DWT1 matrix with outlier columns.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    Magnitude,
    Ria,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Args)]
pub struct PruneArgs {
    /// DWT1 weight files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// DWT1 calibration activations, samples × in_features.
    #[arg(long)]
    pub calib: PathBuf,
    /// Pipeline config JSON; replaces the pattern/stage flags.
    #[arg(long, conflicts_with_all = [
        "pattern", "salient", "scorer", "equalize", "variance_correct",
        "reconstruct", "activation_power", "epsilon", "max_iters",
    ])]
    pub config: Option<PathBuf>,
    /// Residual pattern "N:M" (N kept per M).
    #[arg(long, required_unless_present = "config")]
    pub pattern: Option<PatternShape>,
    /// Salient store pattern "K:256".
    #[arg(long)]
    pub salient: Option<PatternShape>,
    #[arg(long, value_enum, default_value = "ria")]
    pub scorer: ScorerArg,
    /// Equalize weights by activation range before scoring.
    #[arg(long)]
    pub equalize: bool,
    #[arg(long)]
    pub variance_correct: bool,
    /// Tune kept weights against the dense layer output.
    #[arg(long)]
    pub reconstruct: bool,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub activation_power: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Output directory; defaults to each input's directory.
    #[arg(long, short)]
    pub out_dir: Option<PathBuf>,
    /// Value precision of the NMS1 payload; defaults to the input's.
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
    /// Manifest JSON path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the manifest to stdout.
    #[arg(long)]
    pub json: bool,
    /// Files processed concurrently (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Comma-separated "N:M" list.
    #[arg(long, value_delimiter = ',', required = true)]
    pub patterns: Vec<PatternShape>,
    /// Check that stacked 2:4 patterns embed in each half-density pattern.
    #[arg(long)]
    pub verify_superset: bool,
    /// Random score blocks used for the dominance check.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// NMS1 file.
    pub encoded: PathBuf,
    /// Dense DWT1 original.
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Bits per coordinate for the unstructured salient baseline.
    #[arg(long, default_value_t = 32)]
    pub index_bits: u32,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub outliers: usize,
    #[arg(long, default_value_t = 10.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
    #[arg(long, short)]
    pub output: PathBuf,
}

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Pattern(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NMSPARSE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prune(a) => prune::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
