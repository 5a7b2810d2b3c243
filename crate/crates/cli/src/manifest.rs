//! One JSON manifest per command invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub deterministic: bool,
    /// `sha256("blob <len>\0" ++ bytes)` over the run's parameter bytes.
    pub param_hash: String,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
    pub artifacts: Vec<PathBuf>,
    /// Command-specific results (bench bands, final accuracies, suite tallies).
    pub extra: Value,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Git-style object hash: the content is prefixed with `blob <len>\0`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, seed: u64, deterministic: bool) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            deterministic,
            param_hash: String::new(),
            started_at_unix: unix_now(),
            finished_at_unix: 0.0,
            artifacts: Vec::new(),
            extra: Value::Null,
        }
    }

    /// Stamps the end time and writes `manifest_<command>.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_at_unix = unix_now();
        if self.param_hash.is_empty() {
            let canonical = serde_json::to_vec(&self.config).map_err(|e| CliError::Io(e.to_string()))?;
            self.param_hash = blob_hash(&canonical);
        }
        let path = dir.join(format!("manifest_{}.json", self.command));
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn finish_writes_one_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::begin("check", serde_json::json!({"filter": "all"}), 3, true);
        let path = m.finish(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.param_hash.len(), 64);
        assert!(back.finished_at_unix >= back.started_at_unix);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
