//! Command-line front end. Data goes to files; logs go to stderr.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::distributions::FamilyId;
use crate::regression::{CovariateSet, ViolenceScope};
use crate::survey::{Context, ViolenceType};

/// Environment variable naming a default coefficient bundle.
pub const BUNDLE_ENV: &str = "UNCERTAIN_EVENTS_BUNDLE";

pub mod exit {
    pub const FAILURE: i32 = 1;
    pub const INPUT_NOT_FOUND: i32 = 2;
    pub const INSUFFICIENT_DATA: i32 = 3;
    pub const BAD_BUNDLE: i32 = 4;
    pub const EMPTY_EVENTS: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "uncertain-events", version, about = "Plausible fatality distributions for reported conflict events")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit parametric families to every coder distribution in a survey.
    Fit(FitArgs),
    /// Leave-one-coder-out ranking of stage-two configurations.
    Crossval(CrossvalArgs),
    /// Under-reporting curve over a grid, or a pmf table at one value.
    Predict(PredictArgs),
    /// Distribution of total fatalities over an event set.
    Simulate(SimulateArgs),
    /// Per-event draws dataset.
    Draws(DrawsArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub survey: PathBuf,
    /// Comma-separated family labels, e.g. `gumbel-mix,normal-mix`.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<FamilyId>>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "fits.csv")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub tov: Option<Vec<ViolenceType>>,
    #[arg(long, default_value_t = 100)]
    pub population: usize,
    #[arg(long, default_value_t = 100)]
    pub generations: usize,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub fits: PathBuf,
    #[arg(long)]
    pub survey: PathBuf,
    #[arg(long, default_value = "ranking.csv")]
    pub out: PathBuf,
    /// Violence scopes to evaluate (`sb`, `ns`, `os`, `all`); default: each
    /// type present in the survey.
    #[arg(long, value_delimiter = ',')]
    pub tov: Option<Vec<ViolenceScope>>,
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<FamilyId>>,
    /// Covariate sets tried for each parameter, e.g. `none,y,y+D`.
    #[arg(long, value_delimiter = ',', default_value = "none,y,y+D")]
    pub covariates: Vec<CovariateSet>,
    /// Keep only the best configuration of each family.
    #[arg(long)]
    pub best_only: bool,
    /// Directory for the winning configuration's bundle per scope, fitted on
    /// all coders.
    #[arg(long)]
    pub bundle_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BundleArgs {
    /// Coefficient bundle JSON (repeatable, one per violence scope). Defaults
    /// to `$UNCERTAIN_EVENTS_BUNDLE`, else the shipped state-based table.
    #[arg(long)]
    pub bundle: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub bundles: BundleArgs,
    /// pmf table at this reported value.
    #[arg(long, conflicts_with = "grid")]
    pub y: Option<u64>,
    /// Curve grid: `a..b` (inclusive) or a comma list.
    #[arg(long)]
    pub grid: Option<String>,
    /// Also print the trend crossover (mean ≤ ỹ) to stdout.
    #[arg(long)]
    pub crossover: bool,
    #[arg(long, default_value = "sb")]
    pub tov: ViolenceType,
    #[arg(long)]
    pub context: Option<Context>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub bundles: BundleArgs,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long)]
    pub seed: u64,
    /// Receives `totals.csv` and `summary.csv`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Raw continuous draws instead of counts.
    #[arg(long)]
    pub continuous: bool,
}

#[derive(Debug, Args)]
pub struct DrawsArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub bundles: BundleArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "draws.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub continuous: bool,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        let code = match e {
            crate::Error::InsufficientCoders(_) | crate::Error::InsufficientData { .. } => exit::INSUFFICIENT_DATA,
            _ => exit::FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args`, runs, and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::dispatch(&cli.command)),
            Err(e) => Err(CliError::new(exit::FAILURE, format!("thread pool: {e}"))),
        },
        None => commands::dispatch(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}
