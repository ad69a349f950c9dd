//! Command-line harness for the sparse KV compression stack.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod util;

/// A command failure with its exit classification.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<sparkv_core::Error> for CliError {
    fn from(e: sparkv_core::Error) -> Self {
        match e {
            sparkv_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "sparkv",
    about = "Sparse-coding KV cache compression: train dictionaries, compress \
             tensor dumps, sweep error thresholds, benchmark decoding",
    version
)]
struct Cli {
    /// Flat key = value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture-of-subspaces tensor dump.
    GenSynthetic(GenSyntheticArgs),
    /// Train per-(layer, role) dictionaries from a tensor dump.
    Train(TrainArgs),
    /// Compress a tensor dump into a cache state snapshot.
    Compress(CompressArgs),
    /// Reconstruct a tensor dump from a state snapshot.
    Decompress(DecompressArgs),
    /// Sweep early-termination thresholds over a dump.
    Sweep(SweepArgs),
    /// Drive decode steps through a snapshot and report timings.
    Bench(BenchArgs),
    /// Emit a sorted pairwise cosine-similarity map for one layer's keys.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    /// Output dump path.
    #[arg(long)]
    out: PathBuf,
    /// Head dimension.
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    subspaces: usize,
    #[arg(long, default_value_t = 4)]
    subspace_dim: usize,
    #[arg(long, default_value_t = 64)]
    rows_per_subspace: usize,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f32,
    /// Number of transformer layers to emit.
    #[arg(long, default_value_t = 1)]
    layers: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Input tensor dump.
    #[arg(long)]
    dump: PathBuf,
    /// Directory for dictionary files and training reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct CompressArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Directory holding the dictionary files.
    #[arg(long)]
    dicts: PathBuf,
    /// Output state snapshot path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct DecompressArgs {
    /// Input state snapshot.
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    dicts: PathBuf,
    /// Output dump path for the reconstructed tensors.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    dicts: PathBuf,
    /// Comma-separated relative-error thresholds, e.g. 0.2,0.3,0.5
    #[arg(long)]
    thresholds: String,
    /// Also write the table to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    dicts: PathBuf,
    /// Decode steps to drive.
    #[arg(long)]
    steps: usize,
    /// Verify split-path equivalence every N steps (0 = never).
    #[arg(long, default_value_t = 16)]
    check_cadence: usize,
    /// Also write the report to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Layer index to analyze.
    #[arg(long)]
    layer: usize,
    /// Output prefix; writes <prefix>.csv and <prefix>.pgm.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let cfg = match config::RunConfig::load(cli.config.as_deref(), cli.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.exit_code());
        }
    };

    let result = match &cli.command {
        Command::GenSynthetic(args) => commands::gen_synthetic::run(args, &cfg),
        Command::Train(args) => commands::train::run(args, &cfg),
        Command::Compress(args) => commands::compress::run(args, &cfg),
        Command::Decompress(args) => commands::decompress::run(args, &cfg),
        Command::Sweep(args) => commands::sweep::run(args, &cfg),
        Command::Bench(args) => commands::bench::run(args, &cfg),
        Command::Similarity(args) => commands::similarity::run(args, &cfg),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
