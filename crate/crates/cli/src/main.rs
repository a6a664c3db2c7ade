//! `scrb`: sampling, bound computation and estimator benchmarks for RES
//! models.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical degeneracy,
//! 3 integrity violation.

// `!(x <= tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scrb_core::Error;

#[derive(Parser)]
#[command(
    name = "scrb",
    version,
    about = "Cramér-Rao and semiparametric Cramér-Rao bounds for elliptical models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a batch from the configured model and write it as CSV.
    Sample(Common),
    /// Fisher information and CRB by the Schur and projection routes.
    Crb(Common),
    /// Semiparametric bound along the sieve schedule.
    Scrb(Common),
    /// Monte Carlo benchmark of the configured estimators against the bounds.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// Benchmark finished but some report is not valid.
    InvalidReport(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::InvalidReport(_) => 2,
            Failure::Core(e) => match e {
                Error::Model(_)
                | Error::Shape(_)
                | Error::Moment { .. }
                | Error::Submodel(_)
                | Error::Schedule(_)
                | Error::Format(_)
                | Error::Io(_) => 1,
                Error::SingularSpan { .. }
                | Error::SingularFim(_)
                | Error::NonIdentifiable(_)
                | Error::Score { .. }
                | Error::Sampling(_)
                | Error::Estimator(_)
                | Error::NonConvergence { .. } => 2,
                Error::Integrity(_) | Error::BatchMismatch { .. } => 3,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::InvalidReport(m) => m.clone(),
        }
    }
}

type Runner = fn(&config::ExperimentConfig, &std::path::Path) -> Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (run, common): (Runner, Common) = match cli.command {
        Command::Sample(c) => (commands::cmd_sample, c),
        Command::Crb(c) => (commands::cmd_crb, c),
        Command::Scrb(c) => (commands::cmd_scrb, c),
        Command::Bench(c) => (commands::cmd_bench, c),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = std::fs::read_to_string(&common.config)
        .map_err(|e| {
            Failure::Core(Error::Format(format!(
                "cannot read {}: {e}",
                common.config.display()
            )))
        })
        .and_then(|text| config::ExperimentConfig::parse(&text).map_err(Failure::from))
        .and_then(|cfg| run(&cfg, &common.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
