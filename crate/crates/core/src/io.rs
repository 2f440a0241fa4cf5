//! File helpers: atomic writes, content hashes and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("not a file path: {}", path.display()))))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// What a command ran with and what it wrote, enough to rerun it and check
/// the outputs by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<Config>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub timestamp: String,
    pub outputs: Vec<OutputRecord>,
    /// Command-specific results, e.g. fitted parameters.
    #[serde(default)]
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Config>, seed: Option<u64>, timestamp: String) -> Self {
        Self {
            command: command.to_string(),
            config: config.cloned(),
            config_hash: config.map(Config::hash),
            seed,
            timestamp,
            outputs: Vec::new(),
            results: serde_json::Value::Null,
        }
    }

    /// Writes `bytes` atomically to `path` and records its hash.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(OutputRecord { path: path.to_path_buf(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Outputs whose file content no longer matches the recorded hash.
    pub fn verify(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for o in &self.outputs {
            if sha256_file(&o.path)? != o.sha256 {
                stale.push(o.path.clone());
            }
        }
        Ok(stale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
