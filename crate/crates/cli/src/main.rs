//! `doa`: synthesize, ingest, train, predict and evaluate depth-of-anesthesia
//! models.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected internal failure |
//! | 2 | invalid command line or configuration |
//! | 3 | file system error |
//! | 4 | malformed or unusable input data |
//! | 5 | numerical failure (non-finite loss, unstable integration) |
//! | 6 | model and data are incompatible |
//!
//! On failure a single JSON object describing the error is written to stderr.

mod commands;
mod config;
mod failure;
mod fsio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{baseline, evaluate, ingest, plot, predict, synth, train};
use crate::config::Context;

#[derive(Parser)]
#[command(name = "doa", version, about = "Depth-of-anesthesia prediction from infusion histories")]
struct Cli {
    /// Root for default input and output paths.
    #[arg(long, env = "DOA_DATA_DIR", default_value = "doa-data", global = true)]
    data_dir: PathBuf,
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the pipeline.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-case stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic case CSVs.
    Synth(synth::Args),
    /// Clean, bin and split case CSVs into datasets.
    Ingest(ingest::Args),
    /// Train a model on an ingested dataset.
    Train(train::Args),
    /// Predict BIS for every case of a dataset or raw CSVs.
    Predict(predict::Args),
    /// Score prediction sets against the true BIS.
    Evaluate(evaluate::Args),
    /// Predict with the covariate-derived PK-PD model only.
    #[command(name = "baseline-pkpd")]
    BaselinePkpd(baseline::Args),
    /// Join predictions and truths into figure-ready CSVs.
    #[command(name = "plot-data")]
    PlotData(plot::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = Context::new(cli.data_dir, cli.config.as_deref(), cli.seed, cli.jobs).and_then(|ctx| {
        match &cli.command {
            Command::Synth(a) => synth::run(&ctx, a),
            Command::Ingest(a) => ingest::run(&ctx, a),
            Command::Train(a) => train::run(&ctx, a),
            Command::Predict(a) => predict::run(&ctx, a),
            Command::Evaluate(a) => evaluate::run(&ctx, a),
            Command::BaselinePkpd(a) => baseline::run(&ctx, a),
            Command::PlotData(a) => plot::run(&ctx, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = failure::report(&e);
            eprintln!("{}", report.json);
            ExitCode::from(report.code)
        }
    }
}
