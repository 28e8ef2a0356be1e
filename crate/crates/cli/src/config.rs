//! Configuration files. Every file is TOML and rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vertisim_core::cellsim::{CellConditions, GridAxis};
use vertisim_core::orchestrator::Injection;
use vertisim_core::surrogate::RegressorKind;
use vertisim_core::validate::{ReferenceRun, Tolerances};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Seconds of packet arrivals per run.
    pub duration_s: f64,
    #[serde(default = "one")]
    pub replications: u32,
    #[serde(default)]
    pub seed: u64,
    pub base: CellConditions,
    pub axes: Vec<GridAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regressor: RegressorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayConfig {
    #[serde(default)]
    pub injections: Vec<Injection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    pub conditions: CellConditions,
    /// Packet-log CSV used as reference instead of simulating; relative to the config file.
    #[serde(default)]
    pub external_log: Option<PathBuf>,
}

pub const DEFAULT_N_SAMPLES: usize = 10_000;

fn default_n_samples() -> usize {
    DEFAULT_N_SAMPLES
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub reference: ReferenceRun,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub cases: Vec<CaseConfig>,
}

/// Raw bytes of a configuration file and the value parsed from them.
pub struct Loaded<T> {
    pub value: T,
    pub bytes: Vec<u8>,
}

pub fn parse_toml<T: DeserializeOwned>(text: &str, source: &Path) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", source.display())))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
    let value = parse_toml(text, path)?;
    Ok(Loaded { value, bytes })
}
