//! Run manifests: resolved configuration, input hashes, output paths, and
//! wall time for every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use bilevel_core::Result;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub resolved_config: serde_json::Value,
    /// input path -> sha256 of its bytes
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    resolved_config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, resolved_config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            resolved_config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.inputs.insert(path.display().to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Write the manifest next to the outputs.
    pub fn write(self, manifest_path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            resolved_config: self.resolved_config,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_seconds: (self.started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        };
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Default seed: BILEVEL_SEED from the environment, else 42.
pub fn default_seed() -> u64 {
    std::env::var("BILEVEL_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(42)
}
