//! Reproducibility envelope written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, ErrorKind};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Parsed command-line arguments.
    pub config: serde_json::Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    /// Input path to sha256, recorded before processing.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub status: String,
    pub error: Option<ErrorRecord>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tracks the inputs and outputs of one command invocation.
#[derive(Debug)]
pub struct Run {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

impl Run {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, threads: usize, out_dir: &Path) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                seed,
                threads,
                config,
                started_unix_ms: now_ms(),
                finished_unix_ms: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                status: "running".into(),
                error: None,
            },
            out_dir: out_dir.to_path_buf(),
        }
    }

    /// Reads and digests an input file; a missing file is a usage error.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.is_file() {
            return Err(CliError::usage(format!("input file {} does not exist", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Digests an input only if it exists.
    pub fn optional_input(&mut self, path: &Path) -> Result<Option<Vec<u8>>, CliError> {
        if path.is_file() {
            self.input(path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn ensure_out_dir(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    /// Writes `bytes` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        self.record_output(name, bytes);
        Ok(path)
    }

    /// Records a file written by other code.
    pub fn record_output(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(format!("manifest-{}.json", self.manifest.command))
    }

    /// Closes the manifest with the command outcome and writes it.
    pub fn finish(mut self, outcome: &Result<(), CliError>) -> Result<RunManifest, CliError> {
        self.manifest.finished_unix_ms = Some(now_ms());
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "error".into();
                let kind = match e.kind {
                    ErrorKind::Usage => "usage",
                    ErrorKind::Data => "data",
                    ErrorKind::Numerical => "numerical",
                };
                self.manifest.error = Some(ErrorRecord {
                    kind: kind.into(),
                    exit_code: e.exit_code(),
                    message: e.message.clone(),
                });
            }
        }
        self.ensure_out_dir()?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        let path = self.manifest_path();
        std::fs::write(&path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}
