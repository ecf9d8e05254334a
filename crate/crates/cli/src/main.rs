//! `voxelforge` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure. Diagnostics go to stderr as `key=value` lines;
//! results are written to files only.

mod commands;
mod plots;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxelforge::ModelKind;

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "voxelforge", version, about = "Voxel-wise visual encoding models")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Compute Gabor pyramid energies for a dataset's stimuli or an image set.
    GaborExtract(GaborArgs),
    /// Train one model family on every ROI of a dataset.
    Train(TrainArgs),
    /// Score a trained bundle on the dataset's test block.
    Evaluate(EvaluateArgs),
    /// Evaluate two bundles and compare them voxel by voxel.
    Compare(CompareArgs),
    /// Render plots and a text summary from a saved report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON synthetic dataset specification; defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed in the specification.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GaborArgs {
    /// Dataset manifest whose stimuli are filtered.
    #[arg(long, required_unless_present = "images", conflicts_with = "images")]
    dataset: Option<PathBuf>,
    /// Image directory, image file, JSON image list or matrix file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// JSON Gabor configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Append mean luminance as one extra feature.
    #[arg(long)]
    dc_channel: bool,
    /// Matrix file for `--images`, directory for `--dataset`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Gwp,
    DnnLinear,
    DnnTl,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Gwp => ModelKind::Gwp,
            ModelArg::DnnLinear => ModelKind::DnnLinear,
            ModelArg::DnnTl => ModelKind::DnnTl,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    dataset: PathBuf,
    /// JSON model configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_sparsity: Option<usize>,
    #[arg(long)]
    validation_samples: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct StatsArgs {
    /// Pairing shuffles per voxel for the significance threshold.
    #[arg(long)]
    shuffles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report JSON file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    stats: StatsArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    bundle_a: PathBuf,
    #[arg(long)]
    bundle_b: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report JSON file.
    #[arg(long)]
    out: PathBuf,
    /// Directory for SVG plots.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Fixed significance threshold instead of the randomization estimate.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    permutations: Option<usize>,
    #[command(flatten)]
    stats: StatsArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation or comparison report JSON.
    #[arg(long)]
    input: PathBuf,
    /// Directory for plots and `summary.txt`.
    #[arg(long)]
    out: PathBuf,
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("VOXELFORGE_LOG")
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("VOXELFORGE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| format!("VOXELFORGE_THREADS must be a positive integer, got {value:?}"))?;
    if threads == 0 {
        return Err("VOXELFORGE_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
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
    init_logging(cli.verbose, cli.quiet);
    if let Err(msg) = init_threads() {
        log::error!("event=usage_error message={msg:?}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::GaborExtract(a) => commands::gabor_extract(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Compare(a) => commands::compare(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::error!("event=failed exit_code={code} error={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}
