//! `fplab`: train, sample, diagnose and compare score models.
//!
//! Outputs go to `$FPLAB_OUT/<run_name>/` (default `runs/`). The exit code is
//! 0 only when every requested step succeeded.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fplab::config::ExperimentConfig;
use fplab::runner::{self, RunRecord};

#[derive(Parser)]
#[command(name = "fplab", version, about = "Score-model experiments on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a score network.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Generate samples with the reverse-time sampler.
    Sample {
        #[arg(short, long)]
        config: PathBuf,
        /// Network checkpoint; omit to use the exact mixture score
        /// (requires `score_source: "oracle"`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Residual, DSM, Frobenius and score-error curves.
    Diagnose {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Also write the finite-difference residual curve.
        #[arg(long)]
        fd: bool,
    },
    /// Compare two sample files.
    Metrics {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
    },
    /// Dump reference samples and the exact score field.
    TargetDump {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Train and evaluate every penalty/λ/seed cell.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn report(record: &RunRecord) -> bool {
    let dir = runner::output_root().join(&record.run_id);
    match &record.error {
        None => eprintln!("{}: ok ({})", record.verb, dir.display()),
        Some(e) => eprintln!("{}: failed: {e} ({})", record.verb, dir.display()),
    }
    record.ok()
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let out = runner::output_root();
    let record = match cli.verb {
        Verb::Train { config } => runner::run_train(&load(&config)?, &out)?,
        Verb::Sample { config, ckpt } => runner::run_sample(&load(&config)?, ckpt.as_deref(), &out)?,
        Verb::Diagnose { config, ckpt, fd } => runner::run_diagnose(&load(&config)?, ckpt.as_deref(), fd, &out)?,
        Verb::Metrics { config, real, fake } => runner::run_metrics(&load(&config)?, &real, &fake, &out)?,
        Verb::TargetDump { config } => runner::run_target_dump(&load(&config)?, &out)?,
        Verb::Sweep { config } => runner::run_sweep(&load(&config)?, &out)?.record,
    };
    Ok(report(&record))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
