//! `cqs`: world generation, training, encoding, evaluation, ablations,
//! coding-rate analysis, FLOP profiling and attention export.
//!
//! Every command writes `run_manifest.json` into its `--out` directory before
//! anything else and writes nothing outside that directory. Failures print a
//! single `error: kind=<kind> msg="..."` line on stderr and exit nonzero
//! (2 for argument errors, 1 otherwise).

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "cqs",
    version,
    about = "Query-based aggregation for place recognition"
)]
struct Cli {
    /// Worker threads. Reductions run in a fixed order, so results do not
    /// depend on this, but only 1 is covered by the determinism tests.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world and write its observation manifests.
    GenWorld(GenWorldArgs),
    /// Train an aggregation head and write a checkpoint with metrics.
    Train(TrainArgs),
    /// Encode the images of a manifest into a descriptor file.
    Encode(EncodeArgs),
    /// Recall@K of query descriptors against database descriptors.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
    /// Per-image coding rates of one or more checkpoints.
    CodingRate(CodingRateArgs),
    /// Analytic FLOP counts over a list of query counts.
    Flops(FlopsArgs),
    /// Export per-query attention grids for images of a manifest.
    Attn(AttnArgs),
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenWorldArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds data rendering, as in `train`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the world seed.
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    num_places: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainingFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// World spec (as written by `gen-world`); replaces the config's world.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Seeds data rendering and training.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    flags: TrainingFlags,
    #[arg(long)]
    paradigm: Option<String>,
    /// Comma-separated domain names; all domains when omitted.
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Supplies Sinkhorn settings for OT checkpoints.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    db_manifest: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    ks: Vec<usize>,
    /// `distance_m:<meters>` or `frames:<n>`.
    #[arg(long, default_value = "distance_m:25")]
    criterion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Grid {
    Paradigms,
    Nq,
    Cfcr,
    Datasets,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    flags: TrainingFlags,
    #[arg(long, value_enum)]
    grid: Grid,
}

#[derive(Debug, Args)]
struct CodingRateArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128, 256])]
    n_q: Vec<usize>,
    #[arg(long, default_value_t = 768)]
    c_o: usize,
    #[arg(long, default_value_t = 64)]
    c_f: usize,
    #[arg(long, default_value_t = 128)]
    c_r: usize,
    #[arg(long, default_value_t = 322)]
    height: usize,
    #[arg(long, default_value_t = 322)]
    width: usize,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0])]
    queries: Vec<usize>,
    /// Images to export; the first manifest row when omitted.
    #[arg(long, value_delimiter = ',')]
    images: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    match cli.command {
        Command::GenWorld(a) => commands::cmd_gen_world(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Encode(a) => commands::cmd_encode(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Ablate(a) => commands::cmd_ablate(a),
        Command::CodingRate(a) => commands::cmd_coding_rate(a),
        Command::Flops(a) => commands::cmd_flops(a),
        Command::Attn(a) => commands::cmd_attn(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CQS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect();
            let text = head.join(" ");
            eprintln!(
                "{}",
                CliError::Usage(text.trim_start_matches("error: ").to_string()).line()
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
