//! Per-invocation provenance record: what ran, on which bytes, with which
//! effective configuration, producing which bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metaper::encoders::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    /// Every effective configuration value.
    pub config: RunConfig,
    /// Command-specific settings outside [`RunConfig`].
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
    /// Path to SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub threads: usize,
    /// Crate name to version.
    pub versions: BTreeMap<String, String>,
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: RunConfig,
    extra: serde_json::Map<String, serde_json::Value>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
    threads: usize,
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::not_found("INPUT_NOT_FOUND", path, e))?;
    Ok(sha256_hex(&bytes))
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &RunConfig, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            extra: serde_json::Map::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
            threads,
        }
    }

    /// Replaces the recorded configuration with a command's effective one.
    pub fn with_config(mut self, config: RunConfig) -> Self {
        self.config = config;
        self
    }

    pub fn extra(&mut self, key: &str, value: impl Serialize) {
        self.extra.insert(
            key.to_string(),
            serde_json::to_value(value).expect("value serializes"),
        );
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs
            .insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs
            .insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn finish(self) -> RunManifest {
        let versions = [
            ("metaper", env!("CARGO_PKG_VERSION")),
            ("metaper-core", metaper::VERSION),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        RunManifest {
            command: self.command,
            config_hash: self.config.hash(),
            config: self.config,
            extra: self.extra,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            threads: self.threads,
            versions,
        }
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        text.push(b'\n');
        write_atomic(path, &text)
            .map_err(|e| CliError::new("IO_ERROR", format!("{}: {e}", path.display()), 1))
    }
}

/// `out.json` → `out.json.run.json`; directories get `run.json` inside.
pub fn default_manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}
