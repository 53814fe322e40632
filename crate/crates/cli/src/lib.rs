//! Command-line front end: configuration, atomic outputs with a manifest,
//! and the experiment pipelines.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ousb", version, about = "Schrodinger bridges with Ornstein-Uhlenbeck references")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "OUSB_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum System {
    Repressilator,
    Ou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Gaussian,
    Mixture,
    Repressilator,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form bridge between two Gaussians: marginals over time.
    GsbSolve {
        #[command(flatten)]
        common: Common,
        /// Problem file `{process, rho0, rhoT, T, grid}`; only rho0 and rhoT
        /// are required, the rest default to the run configuration.
        #[arg(long, conflicts_with_all = ["rho0", "rho1"], required_unless_present_all = ["rho0", "rho1"])]
        problem: Option<PathBuf>,
        #[arg(long, requires = "rho1")]
        rho0: Option<PathBuf>,
        #[arg(long, requires = "rho0")]
        rho1: Option<PathBuf>,
        /// Also write the affine drift at each output time.
        #[arg(long)]
        drift: bool,
    },
    /// Sample the reference bridge pinned at two points.
    BridgeSample {
        #[command(flatten)]
        common: Common,
        /// Start point, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x0: Vec<f64>,
        /// End point, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xt: Vec<f64>,
        /// Samples per output time.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Entropic coupling between two snapshots: one file holding both, or
    /// one file each.
    Eot {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..=2)]
        data: Vec<PathBuf>,
    },
    /// Fit flow and score networks to snapshot data (files are merged).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Push the first snapshot of `--from` through a trained model.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Generate synthetic snapshot data.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        system: System,
    },
    /// Alternate bridge training and linear drift refits.
    Refit {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Compare two sets of marginals time by time. Each side is a snapshot
    /// CSV or a checkpoint (`.json`) pushed forward from `--from`.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Snapshot CSV whose first snapshot seeds checkpoint sides; its
        /// times are used when neither side is a CSV and `sim.times` is empty.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run a benchmark protocol end to end.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// Ambient dimension for the Gaussian and mixture experiments.
        #[arg(long)]
        d: Option<usize>,
    },
}

/// Set up the thread pool and run one command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    commands::dispatch(cli.command)
}
