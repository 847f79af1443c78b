use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use antiwindup::config::Config;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command bit-for-bit.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub inputs: Vec<InputFile>,
    pub config: Config,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_file(path: &Path) -> std::io::Result<InputFile> {
    let bytes = std::fs::read(path)?;
    Ok(InputFile { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

impl RunManifest {
    pub fn new(command: &str, config: Config, inputs: Vec<InputFile>, started_unix: f64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed: config.design.seed,
            started_unix,
            finished_unix: now_unix(),
            inputs,
            config,
        }
    }
}
