//! Run directories: every artifact is written through [`RunOutput`], which
//! records its checksum for the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// Resolved configuration; feeding it back reproduces the run.
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunOutput {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(RunOutput { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(Artifact { path: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(path)
    }

    /// Adds a file some other writer already placed in the directory.
    pub fn record(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        self.artifacts.push(Artifact { path: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn finish(mut self, command: &str, seeds: Vec<u64>, config: &impl Serialize) -> Result<PathBuf, CliError> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            config: serde_json::to_value(config).map_err(|e| CliError::config(e.to_string()))?,
            artifacts: self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::config(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
