//! Command-line pipeline around `csvd-core`: configuration, report
//! generation and the subcommands of the `csvd` binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod population;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use csvd_core::par::Exec;

use crate::commands::{
    CalibrateArgs, CheckKernelsArgs, EvalCaseArgs, EvalCohortArgs, EvalKernelArgs, SkeletonizeArgs, StatsArgs,
};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "CSVD_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "csvd", version, about = "Calibrated lacune / EPVS detection and evaluation")]
pub struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set calibration.gamma=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads; 1 runs everything on the calling thread, 0 uses all cores.
    #[arg(long, global = true, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adaptive thresholding and lesion extraction for one probability map.
    Calibrate(CalibrateArgs),
    /// Detection and overlap metrics for one predicted / reference mask pair.
    EvalCase(EvalCaseArgs),
    /// Population statistics over a cohort manifest.
    EvalCohort(EvalCohortArgs),
    /// Paired Wilcoxon signed-rank test.
    Stats(StatsArgs),
    /// Verify the loss and attention kernels; exits 3 on failure.
    CheckKernels(CheckKernelsArgs),
    /// Soft skeleton of a probability map.
    Skeletonize(SkeletonizeArgs),
    /// Evaluate one kernel on tensors from files.
    EvalKernel(EvalKernelArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

/// Worker count after defaults: all cores when unset or 0.
pub fn resolve_workers(requested: Option<usize>) -> usize {
    match requested {
        Some(n) if n > 0 => n,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let workers = resolve_workers(cli.workers);
    let exec = Exec::for_workers(workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::input(format!("cannot start {workers} workers: {e}")))?;
    log::debug!("{workers} worker(s), config {}", cfg.sha256());
    pool.install(|| match &cli.command {
        Command::Calibrate(a) => commands::calibrate(a, &cfg, exec),
        Command::EvalCase(a) => commands::eval_case(a, &cfg),
        Command::EvalCohort(a) => commands::eval_cohort(a, &cfg, exec),
        Command::Stats(a) => commands::stats(a, &cfg),
        Command::CheckKernels(a) => commands::check_kernels(a, &cfg),
        Command::Skeletonize(a) => commands::skeletonize(a, &cfg),
        Command::EvalKernel(a) => commands::eval_kernel(a, &cfg),
        Command::ShowConfig => report::write_text(None, &cfg.to_toml_string()),
    })
}
