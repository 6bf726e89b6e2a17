//! `anytime`: simulate schedules, build cosine envelopes, fit rates and
//! validate the exact recursion against Monte Carlo SGD.
//!
//! Exit codes: 0 success, 1 checks failed, 2 config error, 3 numerical
//! divergence, 4 I/O error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::ValidateHooks;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{now_ms, OutputDir};

#[derive(Parser)]
#[command(name = "anytime", version, about = "Anytime learning-rate schedules on power-law linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON), or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to the config's `output_dir`, then
    /// `<out-root>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "ANYTIME_OUT_ROOT", default_value = "anytime-out")]
    out_root: PathBuf,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace files in a nonempty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Exact risk traces, one CSV per (schedule, averaging) pair.
    Simulate(Common),
    /// Cosine envelope, anytime comparison, gap report and figure.
    Envelope(Common),
    /// Fitted rate exponents against predictions.
    Rates(Common),
    /// Exact recursion against Monte Carlo SGD.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Scale σ² in the exact recursion only (negative control).
        #[arg(long, hide = true)]
        corrupt_noise_factor: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, hooks) = match &cli.command {
        Command::Simulate(c) => ("simulate", c, ValidateHooks::default()),
        Command::Envelope(c) => ("envelope", c, ValidateHooks::default()),
        Command::Rates(c) => ("rates", c, ValidateHooks::default()),
        Command::Validate {
            common,
            corrupt_noise_factor,
        } => (
            "validate",
            common,
            ValidateHooks {
                corrupt_noise_factor: *corrupt_noise_factor,
            },
        ),
    };
    let (config, raw) = RunConfig::load(&common.config)?;
    if let Some(jobs) = common.jobs.or(config.jobs) {
        if jobs == 0 {
            return Err(CliError::Config("jobs: must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let out_path = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| common.out_root.join(name));
    let mut out = OutputDir::prepare(&out_path, common.overwrite)?;
    let started = now_ms();
    let outcome = match cli.command {
        Command::Simulate(_) => commands::simulate(&config, &mut out)?,
        Command::Envelope(_) => commands::envelope(&config, &mut out)?,
        Command::Rates(_) => commands::rates(&config, &mut out)?,
        Command::Validate { .. } => commands::validate(&config, &mut out, hooks)?,
    };
    let root = out.root().to_path_buf();
    out.finish(name, &raw, started, outcome.runs)?;
    println!("wrote {}", root.display());
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
