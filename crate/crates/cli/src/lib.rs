//! Command-line front end: bound curves, training sweeps and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds_cmd;
pub mod error;
pub mod files;
pub mod report_cmd;
pub mod svg;
pub mod train_cmd;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mvmdl_core::bounds::LogBase;
use mvmdl_core::experiment::ExperimentConfig;

use crate::bounds_cmd::BoundsConfig;
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "mvmdl",
    version,
    about = "MDL generalization bounds and mixture-prior regularized training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Training: run only this seed. Bounds: seed of the Monte-Carlo column.
    #[arg(long)]
    pub seed: Option<u64>,
    /// How nats-valued MDL terms combine with entropy terms in bits.
    #[arg(long, default_value = "mixed", value_parser = parse_log_base)]
    pub log_base: LogBase,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bound-comparison curves and label-shift residual tables.
    Bounds(Common),
    /// Train every (regularizer, lambda, seed) of an experiment config.
    Train(Common),
    /// Re-aggregate the runs of a training output directory.
    Report {
        run_dir: PathBuf,
        /// Where to write the summary; defaults to RUN_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_log_base(s: &str) -> Result<LogBase, String> {
    s.parse().map_err(|e: mvmdl_core::Error| e.to_string())
}

fn load<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => files::read_config(p),
        None => Ok(T::default()),
    }
}

/// Runs one parsed command and returns the text to print.
pub fn execute(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Bounds(c) => {
            let cfg: BoundsConfig = load(&c.config)?;
            let s = bounds_cmd::run(&cfg, &c.out, c.log_base, c.seed.unwrap_or(0))?;
            let mut text = format!(
                "tv {:.6}, square-root bound at MDL 0: {:.6}\n",
                s.tv, s.sqrt_bound_at_zero
            );
            for curve in &s.curves {
                let cross = curve.crossover.map_or("none".to_string(), |c| c.to_string());
                text.push_str(&format!("emp risk {}: crossover at MDL/n {cross}\n", curve.emp_risk));
            }
            text.push_str(&format!("max residual / gen. error: {:.4}\n", s.max_residual_ratio));
            Ok(text)
        }
        Command::Train(c) => {
            let mut cfg: ExperimentConfig = load(&c.config)?;
            if let Some(seed) = c.seed {
                cfg.seeds = vec![seed];
            }
            let threads = train_cmd::thread_count()?;
            let summary = train_cmd::run(&cfg, &c.out, c.log_base, threads)?;
            Ok(report_cmd::render(&summary))
        }
        Command::Report { run_dir, out } => {
            if !run_dir.is_dir() {
                return Err(CliError::Missing(run_dir));
            }
            let summary = report_cmd::run(&run_dir, out.as_deref())?;
            Ok(report_cmd::render(&summary))
        }
    }
}
