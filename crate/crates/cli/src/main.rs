//! `datr`: dataset generation, training, evaluation, prediction and
//! transfer for domain-adaptive landmark detection.

mod commands;
mod config;
mod export;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "datr", version, about = "Multi-domain anatomical landmark detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value settings file; command-line overrides win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Architecture and schedule preset: toy or paper.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Individual overrides, e.g. `--set epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-domain dataset.
    GenSynth(commands::GenSynth),
    /// Train jointly on every domain under a dataset root.
    Train(commands::Train),
    /// Report MRE, SDR and identification rate per domain.
    Evaluate(commands::Evaluate),
    /// Predict landmarks for images of one domain.
    Predict(commands::Predict),
    /// Add a new domain to a trained model with shared parameters frozen.
    Transfer(commands::Transfer),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<datr_core::Error> for CliError {
    fn from(e: datr_core::Error) -> Self {
        match e {
            datr_core::Error::Numeric(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&cli.common, a),
        Command::Train(a) => commands::train(&cli.common, a),
        Command::Evaluate(a) => commands::evaluate(&cli.common, a),
        Command::Predict(a) => commands::predict(&cli.common, a),
        Command::Transfer(a) => commands::transfer(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
