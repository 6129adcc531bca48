//! Run manifest: what ran, on which inputs, with which settings.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let mut file = std::fs::File::open(path).map_err(|e| CliError::data(path.display(), e))?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 1 << 16];
        let mut bytes = 0u64;
        loop {
            let n = file.read(&mut buf).map_err(|e| CliError::data(path.display(), e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(Self { path: path.to_path_buf(), bytes, sha256: format!("{:x}", hasher.finalize()) })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub cli: &'static str,
    pub core: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Hash of the effective configuration below, serialized as compact JSON.
    pub config_sha256: String,
    pub config: Value,
    pub seed: u64,
    pub versions: Versions,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: Value, seed: u64) -> Self {
        let config_sha256 = sha256_hex(config.to_string().as_bytes());
        Self {
            command: command.to_string(),
            args,
            config_sha256,
            config,
            seed,
            versions: Versions { cli: env!("CARGO_PKG_VERSION"), core: ontex::VERSION },
            started_at: now(),
            finished_at: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = now();
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
