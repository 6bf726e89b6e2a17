//! Output directory handling and run provenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub name: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub runs: Vec<RunStatus>,
    pub files: Vec<FileEntry>,
    pub config: Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the config with object keys in sorted order, so the hash
/// does not depend on how the document was written.
pub fn config_hash(config: &Value) -> String {
    // serde_json's default map is ordered by key
    let canonical = serde_json::to_vec(config).expect("Value always serializes");
    hex(&Sha256::digest(canonical))
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Destination directory for one command's outputs.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputDir {
    /// Creates `root`. An existing nonempty directory is an error unless
    /// `overwrite` is set, in which case files are replaced in place.
    pub fn prepare(root: &Path, overwrite: bool) -> Result<Self, CliError> {
        if root.exists() {
            let nonempty = fs::read_dir(root)
                .map_err(|e| CliError::io(root, e))?
                .next()
                .is_some();
            if nonempty && !overwrite {
                return Err(CliError::io(
                    root,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "output directory is not empty (pass --overwrite to replace)",
                    ),
                ));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `name` through `fill` and records it for the manifest.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let path = self.root.join(name);
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| CliError::io(&path, e))?;
        let mut file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        file.write_all(&buf).map_err(|e| CliError::io(&path, e))?;
        if !self.files.contains(&path) {
            self.files.push(path);
        }
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        config: &Value,
        started: u128,
        runs: Vec<RunStatus>,
    ) -> Result<RunManifest, CliError> {
        let mut files = Vec::with_capacity(self.files.len());
        for path in &self.files {
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            files.push(FileEntry {
                path: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            runs,
            files,
            config: config.clone(),
        };
        let path = self.root.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"x": 1, "y": {"b": 2, "a": [1, 2]}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"y": {"a": [1, 2], "b": 2}, "x": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: Value = serde_json::from_str(r#"{"x": 1, "y": {"b": 2, "a": [2, 1]}}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn refuses_nonempty_dir_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        let err = OutputDir::prepare(dir.path(), false).err().unwrap();
        assert_eq!(err.exit_code(), 4);
        assert!(OutputDir::prepare(dir.path(), true).is_ok());
    }
}
