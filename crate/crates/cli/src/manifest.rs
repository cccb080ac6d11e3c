use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let data = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub summary: serde_json::Value,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub struct Run {
    command: &'static str,
    config: RunConfig,
    started: Instant,
    started_unix: u64,
    inputs: Vec<FileEntry>,
    outputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

impl Run {
    pub fn start(command: &'static str, config: RunConfig, out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Self {
            command,
            config,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: Vec::new(),
            outputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileEntry::of(path)?);
        Ok(())
    }

    /// Path for an output file inside the run directory, recorded for
    /// hashing when the run finishes.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn finish(self, summary: serde_json::Value) -> Result<RunManifest, CliError> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileEntry::of(p))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            config: self.config,
            inputs: self.inputs,
            outputs,
            summary,
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
