use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(name = "vertisim", version, about = "Two-tier 5G cell and city simulation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// TOML configuration file of the command.
    #[arg(long, global = true, env = "VERTISIM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "VERTISIM_OUT")]
    pub out: Option<PathBuf>,
    /// Root seed, overriding the one in the configuration.
    #[arg(long, global = true, env = "VERTISIM_SEED")]
    pub seed: Option<u64>,
    /// Upper bound on parallel workers.
    #[arg(long, global = true, env = "VERTISIM_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, env = "VERTISIM_TOLERANCE_KS")]
    pub tolerance_ks: Option<f64>,
    #[arg(long, global = true, env = "VERTISIM_TOLERANCE_MEAN")]
    pub tolerance_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum RegressorArg {
    Multilinear,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
pub enum Command {
    /// Run the cell simulator over a parameter grid.
    Sweep,
    /// Fit KPI distributions to a sweep dataset.
    Fit {
        /// Sweep output directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the surrogate from a distribution table.
    Train {
        /// Distribution table CSV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = RegressorArg::Multilinear)]
        regressor: RegressorArg,
        /// Polynomial degree (1 or 2).
        #[arg(long, default_value_t = 2)]
        degree: u32,
        /// Ridge penalty of the polynomial regressor.
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
    },
    /// Turn a scenario into per-cell intervals of constant conditions.
    Urban {
        /// Activity statistics JSON to validate against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// City-scale run of a scenario.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        intervals: PathBuf,
    },
    /// Paired baseline and injected runs of a scenario.
    Whatif {
        /// TOML file with the injections to add.
        #[arg(long)]
        overlay: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        intervals: PathBuf,
    },
    /// Compare the surrogate with the cell simulator or measured logs.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Print every configuration default.
    Defaults,
    /// Replay the run recorded in a manifest and check outputs are byte-identical.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Fit { .. } => "fit",
            Command::Train { .. } => "train",
            Command::Urban { .. } => "urban",
            Command::Run { .. } => "run",
            Command::Whatif { .. } => "whatif",
            Command::Validate { .. } => "validate",
            Command::Defaults => "defaults",
            Command::Rerun { .. } => "rerun",
        }
    }
}
