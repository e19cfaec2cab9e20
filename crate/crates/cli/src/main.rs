use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frrr::ErrorCategory;

mod commands;
mod config;
mod output;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] frrr::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("partial results: {0}")]
    Partial(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Partial(_) => 4,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Io => 1,
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numerical => 4,
            },
        }
    }
}

/// Fractional-posterior reduced-rank regression toolkit.
#[derive(Parser)]
#[command(name = "frrr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a low-rank truth, a design and responses.
    Generate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sample the fractional posterior for a dataset directory.
    Fit {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Directory holding X.csv, Y.csv and meta.toml.
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Recompute the posterior mean from a stored chain.
    Summarize {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chain: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Divergences between two natural-parameter matrices.
    Divergence {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        zeta: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check the divergence lemmas on random parameter pairs.
    VerifyBounds {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Monte Carlo study of the contraction rates.
    RateStudy {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Misspecified-link study around the KL minimiser.
    Misspec {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FRRR_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FRRR_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    set_threads()?;
    match cli.command {
        Command::Generate { config, out } => commands::generate(&load(&config)?, &out),
        Command::Fit { config, data, out } => commands::fit(&load(&config)?, &data, &out),
        Command::Summarize { config, chain, out } => commands::summarize(&load(&config)?, &chain, &out),
        Command::Divergence { config, theta, zeta, out } => commands::divergence(&load(&config)?, &theta, &zeta, &out),
        Command::VerifyBounds { config, out } => commands::verify_bounds(&load(&config)?, &out),
        Command::RateStudy { config, out } => commands::rate_study(&load(&config)?, &out),
        Command::Misspec { config, out } => commands::misspec(&load(&config)?, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("frrr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
