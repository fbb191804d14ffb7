//! `nestdiff`: sampling runs, ratio sweeps, inverse problems, metrics and
//! the session server.

mod commands;
mod serve;
mod setup;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nestdiff", version, about = "Anytime nested diffusion sampling over Gaussian-mixture data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching config
/// file entry.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment config (TOML). Without it a built-in 2D four-component prior is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of outer steps.
    #[arg(long)]
    pub outer: Option<usize>,
    /// Inner steps per outer step.
    #[arg(long)]
    pub inner: Option<usize>,
    /// Inner DDIM eta.
    #[arg(long)]
    pub eta_inner: Option<f64>,
    /// Outer DDIM eta.
    #[arg(long)]
    pub eta_outer: Option<f64>,
    #[arg(long, value_enum)]
    pub kind_inner: Option<KindArg>,
    /// Branches per session.
    #[arg(long)]
    pub branches: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Independent runs (population size).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Ddpm,
    Ddim,
    Dpmpp2s,
}

/// An `OUTERxINNER` pair such as `4x15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub outer: usize,
    pub inner: usize,
}

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (o, i) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected OUTERxINNER, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad step count in {s:?}"));
        Ok(Pair { outer: parse(o)?, inner: parse(i)? })
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Nested (or vanilla) sampling; writes traces.csv, curve.csv and summary.json.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Plain reverse process with the inner transition kind.
        #[arg(long)]
        vanilla: bool,
        /// Vanilla step count; defaults to the plan's NFE budget.
        #[arg(long, requires = "vanilla")]
        steps: Option<usize>,
    },
    /// AUC table over outer/inner splits of one NFE budget.
    SweepRatio {
        #[command(flatten)]
        common: Common,
        /// Comma-separated pairs, e.g. `1x60,2x30,4x15`.
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<Pair>,
    },
    /// Measurement-conditioned nested sampling.
    Inverse {
        #[command(flatten)]
        common: Common,
        /// Observed coordinates of a mask operator (overrides the config problem).
        #[arg(long, value_delimiter = ',')]
        keep: Option<Vec<usize>>,
        #[arg(long)]
        sigma_y: Option<f64>,
    },
    /// Recomputes the anytime curve and summary metrics from a traces file.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/traces.csv`.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Runs the session API until interrupted.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 64)]
        max_sessions: usize,
        /// Append every session's events to `<out>/sessions/<id>.jsonl`.
        #[arg(long)]
        event_log: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Errors while loading and checking inputs.
pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Errors while running.
pub fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sample { common, vanilla, steps } => commands::sample(&common, vanilla, steps),
        Command::SweepRatio { common, pairs } => commands::sweep_ratio(&common, &pairs),
        Command::Inverse { common, keep, sigma_y } => commands::inverse(&common, keep, sigma_y),
        Command::Metrics { common, traces } => commands::metrics(&common, traces),
        Command::Serve { common, bind, max_sessions, event_log } => serve::run(&common, &bind, max_sessions, event_log),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
