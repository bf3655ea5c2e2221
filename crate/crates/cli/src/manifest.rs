//! `manifest.json`, written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// The config file given on the command line, if any.
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the effective configuration after defaults and overrides.
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects outputs while a command runs.
pub struct Run {
    started: Instant,
    manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str, config_path: Option<&Path>, effective_config: &str, seed: u64) -> Self {
        Run {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                config_hash: sha256_hex(effective_config.as_bytes()),
                seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_s: 0.0,
            },
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    pub fn finish(mut self, out_dir: &Path) -> CliResult<RunManifest> {
        self.manifest.wall_clock_s = self.started.elapsed().as_secs_f64();
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
        Ok(self.manifest)
    }
}
