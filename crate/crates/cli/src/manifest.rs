//! Run manifests: every output file traces back to the command, config, seed,
//! and weight-content hash that produced it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: u64,
    started_unix: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    weights_sha256: Option<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            started_unix: now_unix(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            weights_sha256: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn weights_file(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("hashing weights {}", path.display()))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.weights_sha256 = Some(format!("{:x}", hasher.finalize()));
        Ok(self)
    }

    /// Write `<output>.manifest.json` next to the primary output.
    pub fn write_for(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = primary_output.with_extension("manifest.json");
        let doc = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "started_unix": self.started_unix,
            "finished_unix": now_unix(),
            "inputs": self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "weights_sha256": self.weights_sha256,
        });
        std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&doc)?))
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}
