use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Cli;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// The resolved invocation, paths made absolute.
    pub invocation: Cli,
    pub config_sha256: Option<String>,
    /// Input file path to digest.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub outputs: Vec<OutputFile>,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Writes `manifest.json` into `dir` through a temporary file and a rename.
    pub fn write_atomic(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let io = |e: std::io::Error| CliError::Data(format!("writing manifest: {e}"));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(text.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(io)
    }
}
