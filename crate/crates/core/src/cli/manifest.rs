//! Run manifests: what went in, what came out, under which configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub notes: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes every regular file under each path, in sorted order.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<FileHash>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        for entry in WalkDir::new(p).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::Run(e.to_string()))?;
            if entry.file_type().is_file() {
                out.push(FileHash {
                    path: entry.path().display().to_string(),
                    sha256: hash_file(entry.path())?,
                });
            }
        }
    }
    Ok(out)
}

/// Collects outputs written during a run.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<FileHash>,
}

impl Outputs {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` under the output directory atomically.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.record(rel, bytes);
        Ok(path)
    }

    /// Registers a file that was written by other means.
    pub fn record(&mut self, rel: &Path, bytes: &[u8]) {
        let path = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        self.files.retain(|f| f.path != path);
        self.files.push(FileHash {
            path,
            sha256: sha256_hex(bytes),
        });
    }

    pub fn finish(
        mut self,
        command: &str,
        config_digest: String,
        inputs: Vec<FileHash>,
        notes: serde_json::Value,
    ) -> Result<Manifest, CliError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_digest,
            inputs,
            outputs: self.files,
            notes,
        };
        let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(
            &self.root.join("manifests").join(format!("{command}.json")),
            &body,
        )?;
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
