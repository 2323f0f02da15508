//! `coda`: dataset generation, training, adaptation and analyses from one config.
//!
//! Exit codes: 0 success, 2 config or usage, 3 format or version, 4 numerical failure.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use coda::hypernet::PenaltyVariant;
use coda::CodaError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Coda(CodaError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Coda(e) => match e {
                CodaError::Config(_) | CodaError::Shape(_) | CodaError::Io(_) => 2,
                CodaError::Format(_) | CodaError::Version { .. } | CodaError::Json(_) => 3,
                CodaError::Numerical { .. }
                | CodaError::Integration { .. }
                | CodaError::Training { .. }
                | CodaError::Adaptation(_)
                | CodaError::SingularHessian { .. }
                | CodaError::DegenerateFit(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => f.write_str(s),
            CliError::Coda(e) => write!(f, "{e}"),
        }
    }
}

impl From<CodaError> for CliError {
    fn from(e: CodaError) -> Self {
        CliError::Coda(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "coda", version, about = "Context-informed dynamics adaptation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config; missing keys take per-system defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<PenaltyVariant>,
    /// Context dimension.
    #[arg(long, global = true)]
    dxi: Option<usize>,
}

fn parse_variant(s: &str) -> Result<PenaltyVariant, String> {
    match s {
        "l1" => Ok(PenaltyVariant::L1),
        "l2" => Ok(PenaltyVariant::L2),
        _ => Err(format!("expected l1 or l2, got {s:?}")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate train, adapt and eval splits.
    Generate,
    /// Fit the hypernetwork (or the ERM baseline) on the train split.
    Train {
        /// Train a single shared parameter vector instead.
        #[arg(long)]
        erm: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit contexts for the adaptation environments.
    Adapt {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use only the first N trajectories per environment.
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Forecast the eval split from initial conditions.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of mse,mape.
        #[arg(long, value_delimiter = ',', default_value = "mse,mape")]
        metrics: Vec<String>,
    },
    /// Map contexts to system parameters with an affine fit.
    Estimate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        adapt_data: Option<PathBuf>,
    },
    /// Per-environment loss over a 2-D slice through θc.
    Landscape {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Singular values of the per-environment gradients.
    Svd {
        /// Evaluate at this checkpoint's θc instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Keep absolute gradients instead of differences to the last environment.
        #[arg(long)]
        absolute: bool,
    },
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CODA_LOG", "info"))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
