//! Per-run record written next to every subcommand's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Fully resolved settings of the run.
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn artifact(path: &Path) -> Result<Artifact> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256,
        bytes,
    })
}

/// Collects inputs and outputs while a subcommand runs.
pub struct Recorder {
    subcommand: String,
    seed: Option<u64>,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(subcommand: &str, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            seed,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes every recorded file and writes the manifest into `dir`.
    pub fn finish(self, dir: &Path, config: serde_json::Value) -> Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            argv: std::env::args().collect(),
            seed: self.seed,
            config,
            inputs: self.inputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
