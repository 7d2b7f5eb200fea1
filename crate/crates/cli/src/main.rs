//! `ewi`: generate, ingest, featurize, train, evaluate, ablate, score,
//! explain, what-if and serve.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! arguments or references, 3 unreadable or malformed cohort data.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Corpus(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Corpus(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ewi", version, about = "Daily deterioration early-warning pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the cohort and model seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory for every artifact.
    #[arg(long, global = true, default_value = "ewi-data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort to <data-dir>/cohort.jsonl.
    Generate {
        #[arg(long)]
        patients: Option<usize>,
        /// Planted-signal multiplier; 0 gives a null cohort.
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Parse, filter and audit a cohort file into <data-dir>/cohort.clean.jsonl.
    Ingest {
        /// Defaults to <data-dir>/cohort.jsonl.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build the labeled feature table <data-dir>/features.tsv.
    Featurize,
    /// Chronological split, grid search and refit; writes <data-dir>/model.json.
    Train {
        /// `gbt` or `rf`; defaults to the configured kind.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Test-split AUROC, threshold sweep and calibration.
    Evaluate,
    /// Modality ablation table.
    Ablate {
        /// Comma-separated model kinds.
        #[arg(long, default_value = "rf,gbt")]
        kinds: String,
    },
    /// Daily scoring run(s); writes alerts and explanations.
    Score {
        #[arg(long)]
        date: Option<NaiveDate>,
        /// First date of a range (inclusive); runs are scored in order.
        #[arg(long, conflicts_with = "date")]
        from: Option<NaiveDate>,
        #[arg(long, requires = "from")]
        to: Option<NaiveDate>,
    },
    /// Top drivers of one stored alert.
    Explain {
        /// Patient-day key, `<patient_id>@YYYY-MM-DD`.
        patient_day: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Re-tier stored alerts under candidate thresholds.
    Whatif {
        #[arg(long)]
        red_level: Option<f64>,
        #[arg(long)]
        red_delta: Option<f64>,
        #[arg(long)]
        yellow_level: Option<f64>,
        #[arg(long)]
        yellow_delta: Option<f64>,
    },
    /// Serve stored runs over HTTP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        /// Reference date for model staleness; defaults to today.
        #[arg(long)]
        as_of: Option<NaiveDate>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
