//! Run directories, artifact hashing and the run record.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliError;

pub const RECORD_FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub cathtwin: String,
    pub weights_format: u32,
    pub protocol: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            cathtwin: env!("CARGO_PKG_VERSION").to_string(),
            weights_format: cathtwin_core::WEIGHTS_FORMAT_VERSION,
            protocol: crate::protocol::PROTOCOL_VERSION,
        }
    }
}

/// What a subcommand consumed and produced, by content hash. Paths are relative to the run
/// directory so records from different directories compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub command: String,
    pub versions: Versions,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// A run directory being written. Every file goes through `write`, which hashes it into the
/// record.
pub struct RunDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    /// Create (or reuse) `root` and write the config snapshot into it.
    pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let snapshot = cfg.snapshot();
        let mut dir = Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            config_hash: sha256_hex(snapshot.as_bytes()),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        };
        dir.write("config.snapshot", snapshot.as_bytes())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn note_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.insert(name.to_string(), sha256_hex(bytes));
    }

    /// Write run_record.json and return the record.
    pub fn finish(self, summary: serde_json::Value) -> Result<RunRecord, CliError> {
        let record = RunRecord {
            format_version: RECORD_FORMAT_VERSION,
            command: self.command,
            versions: Versions::default(),
            config_hash: self.config_hash,
            inputs: self.inputs,
            artifacts: self.artifacts,
            summary,
        };
        let path = self.root.join("run_record.json");
        std::fs::write(&path, record.to_json()).map_err(|e| CliError::io(&path, e))?;
        Ok(record)
    }
}

pub fn read_artifact(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::MissingArtifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_artifact(path)?).map_err(|e| CliError::io(path, e))
}
