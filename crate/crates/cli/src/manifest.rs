use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use mnar_core::output::to_json_string;
use mnar_core::Result;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one run: what was asked, what was read and what was written.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: chrono::DateTime<chrono::Utc>,
    clock: std::time::Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize) -> Self {
        ManifestBuilder {
            command: command.into(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            seed: None,
            inputs: Vec::new(),
            started: chrono::Utc::now(),
            clock: std::time::Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Digest everything and write `manifest.json` next to the outputs.
    pub fn finish(self, outputs: &[PathBuf], dir: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            arguments: std::env::args().collect(),
            config: self.config,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            inputs: digests(&self.inputs)?,
            outputs: digests(outputs)?,
            started_at: self.started.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, to_json_string(&manifest)? + "\n")?;
        Ok(path)
    }
}
