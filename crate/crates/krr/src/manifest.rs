//! Run manifests.
//!
//! Every command writes one manifest next to its outputs. It records the
//! fully resolved job (kernel hyperparameters after the median heuristic,
//! λ after `auto`, the seed after the `KRR_SEED` fallback) and a SHA-256
//! digest of each output, so `krr replay` can rerun the job and check the
//! bytes without consulting the original command line or config files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl OutputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(OutputRecord {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: format!("{:x}", Sha256::digest(&data)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command line as typed, for the record; replay uses `job`.
    pub args: Vec<String>,
    /// The resolved job, tagged by command.
    pub job: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Default manifest location for a single-file output: `<out>.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
