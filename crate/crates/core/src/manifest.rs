//! Run manifests. Every artifact a command produces (dataset, model,
//! policy, report) gets a sidecar named `<artifact>.manifest.json` holding
//! the exact config snapshot, the seeds, SHA-256 hashes of inputs and
//! outputs, and the toolkit version — enough to re-run or audit the stage.
//! The sidecar carries the only nondeterministic fields (timestamp, host),
//! so the artifacts themselves stay bit-reproducible.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub created_unix_ms: u64,
    pub host_os: String,
    pub host_arch: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256 of its bytes (hashed after writing).
    pub outputs: BTreeMap<String, String>,
    /// Full config snapshot in effect for the run.
    pub config: serde_json::Value,
    /// Command-specific summary: coverage stats, metrics, timings.
    pub notes: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> RunManifest {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            created_unix_ms: now,
            host_os: std::env::consts::OS.to_string(),
            host_arch: std::env::consts::ARCH.to_string(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config,
            notes: serde_json::Value::Null,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Write the sidecar next to `artifact` and return its path.
    pub fn save_for(&self, artifact: &Path) -> Result<PathBuf> {
        let path = manifest_path(artifact);
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        std::fs::write(&path, body)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| Error::Format(format!("manifest decode: {e}")))
    }
}

/// The sidecar convention: `model.bin` is described by
/// `model.bin.manifest.json` in the same directory.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}
