use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stamp written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Absent when the command ran from flags alone.
    pub config_path: Option<PathBuf>,
    /// sha256 of the config file bytes, or of the effective settings as JSON
    /// when there is no file.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub version: String,
    pub output: PathBuf,
}

pub fn version_stamp() -> String {
    match option_env!("DIFFVOC_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config_digest: String, seed: Option<u64>, output: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_digest,
            seed,
            version: version_stamp(),
            output: output.to_path_buf(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing run manifest {}", path.display()))
    }
}
