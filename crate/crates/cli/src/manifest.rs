//! Run manifests: what a command read, what it wrote, and content hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub dataset_seed: Option<u64>,
    pub checkpoint_hash: Option<String>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: None,
                dataset_seed: None,
                checkpoint_hash: None,
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
            },
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<(), CliError> {
        let bytes = serde_json::to_vec(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        self.manifest.config_hash = Some(sha256_hex(&bytes));
        Ok(())
    }

    pub fn dataset_seed(&mut self, seed: u64) {
        self.manifest.dataset_seed = Some(seed);
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.checkpoint_hash = Some(file_hash(path)?);
        Ok(())
    }

    /// Writes `contents` to `path` and records it as an output.
    pub fn write(&mut self, path: &Path, contents: &[u8]) -> Result<(), CliError> {
        fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
        self.record(path)
    }

    /// Records an output written elsewhere.
    pub fn record(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = file_hash(path)?;
        self.manifest.outputs.push(Artifact {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest, CliError> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Usage(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}
