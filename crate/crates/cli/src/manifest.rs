//! Run manifests and run-directory locking.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

/// Record of one command invocation. Everything except the two timestamps
/// is a pure function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    /// SHA-256 over the config text and every input file, in order.
    pub input_hash: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn content_hash(config: &str, inputs: &[&Path]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    for p in inputs {
        let bytes = std::fs::read(p).map_err(|e| CliError::input(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).map_err(esbm::Error::from)?;
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n").map_err(esbm::Error::from)?;
        Ok(())
    }
}

/// Held for the lifetime of a command; a second command on the same
/// directory fails instead of interleaving writes.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::input(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
