//! Run manifests: one JSON file written beside each command's outputs,
//! recording what produced them.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Provenance of one command invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Starts the clock for a command; outputs are appended as they are
    /// written and the finish time is stamped by [`RunManifest::write`].
    pub fn begin(command: &str, config_digest: String, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now_unix();
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(path)
    }
}
