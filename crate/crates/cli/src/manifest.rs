use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Bumped whenever a CSV column set changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub csv_schema_version: u32,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    /// Arguments of the command as parsed.
    pub args: serde_json::Value,
    /// Fully resolved configuration (training runs only).
    pub config: Option<serde_json::Value>,
    pub started_unix: Option<f64>,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub outputs: Vec<String>,
}

pub fn now_unix(enabled: bool) -> Option<f64> {
    enabled.then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: Option<usize>, out_dir: &Path, args: serde_json::Value, timing: bool) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            csv_schema_version: CSV_SCHEMA_VERSION,
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            out_dir: out_dir.to_path_buf(),
            args,
            config: None,
            started_unix: now_unix(timing),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, status: &str, timing: bool) {
        self.status = status.into();
        self.finished_unix = now_unix(timing);
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", 3, Some(1), dir.path(), serde_json::json!({"cycles": 0}), false);
        m.finish("completed", false);
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        assert_eq!(RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
        assert!(m.started_unix.is_none() && m.finished_unix.is_none());
    }
}
