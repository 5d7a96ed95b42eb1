//! `ldtl` — config-driven front door for the distillation pipeline.
//! Exit codes: 0 success, 1 invalid config/input, 2 runtime failure.

mod config;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Paths, RunConfig};

#[derive(Parser)]
#[command(
    name = "ldtl",
    version,
    about = "Latent-space dataset distillation pipeline",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// TOML run configuration (required by every subcommand)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides `out` from the config
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Trial parallelism inside `eval`
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Master seed; overrides `seed` from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy corpus: raw counts plus normalized train/test splits
    GenData,
    /// Train the foundation autoencoder on the train split
    TrainAe,
    /// Train the conditional generator in the frozen latent space
    TrainScdg,
    /// Optimize latent codes and decode the synthetic set
    Distill,
    /// Train fresh classifiers on the synthetic set and score on test
    Eval,
    /// Merge per-trial metrics CSVs into one aggregate
    Report,
}

fn run(cli: Cli) -> ldtl_core::Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        ldtl_core::Error::Config("--config <PATH> is required".into())
    })?;
    if cli.threads == 0 {
        return Err(ldtl_core::Error::Config("--threads must be >= 1".into()));
    }
    let cfg = RunConfig::load(&config_path, cli.seed, cli.out)?;
    let paths = Paths::new(&cfg.out);
    match cli.cmd {
        Cmd::GenData => pipeline::gen_data(&cfg, &paths),
        Cmd::TrainAe => pipeline::train_ae(&cfg, &paths),
        Cmd::TrainScdg => pipeline::train_scdg(&cfg, &paths),
        Cmd::Distill => pipeline::distill(&cfg, &paths),
        Cmd::Eval => pipeline::eval(&cfg, &paths, cli.threads),
        Cmd::Report => {
            let rows = report::report(&paths.metrics_dir(), &paths.report())?;
            println!("report: {rows} rows -> {}", paths.report().display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too and must stay exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
