//! Command-line driver: watermark design, attack simulation, detector
//! evaluation, and numeric self-checks, all from one JSON config.

mod commands;
mod config;
mod error;
mod output;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Design physical watermarks for control loops with packet drops and
/// evaluate replay/integrity attack detection.
#[derive(Parser)]
#[command(name = "markdrop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search the configured designer grid and emit the chosen watermark.
    Design(RunArgs),
    /// Record one trial and write its per-step detector traces.
    Simulate(RunArgs),
    /// Sweep alarm thresholds over paired clean/attacked trials.
    Roc(RunArgs),
    /// Measure detection delay per trial and threshold.
    Ttd(RunArgs),
    /// Compare both detectors' statistics before and after the attack.
    Fault(RunArgs),
    /// Check solver, designer, and simulator outputs against independent
    /// references.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory result files are written into.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial parallelism (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Experiment configuration (JSON); checks a built-in two-state config
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory result files are written into.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial parallelism (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_only = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if usage_only {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Design(args) => with_config(args, commands::cmd_design),
        Command::Simulate(args) => with_config(args, commands::cmd_simulate),
        Command::Roc(args) => with_config(args, commands::cmd_roc),
        Command::Ttd(args) => with_config(args, commands::cmd_ttd),
        Command::Fault(args) => with_config(args, commands::cmd_fault),
        Command::Verify(args) => {
            init_threads(args.threads)?;
            let mut cfg = match &args.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => verify::default_config(),
            };
            if let Some(seed) = args.seed {
                cfg.experiment.master_seed = seed;
            }
            prepare_out(&args.out)?;
            verify::cmd_verify(&cfg, &args.out)
        }
    }
}

fn with_config(
    args: RunArgs,
    command: impl FnOnce(&ExperimentConfig, &Path) -> Result<()>,
) -> Result<()> {
    init_threads(args.threads)?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.experiment.master_seed = seed;
    }
    prepare_out(&args.out)?;
    command(&cfg, &args.out)
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}
