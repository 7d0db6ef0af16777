//! `manifest.json`: what a subcommand ran and a checksum of everything it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative path (forward slashes) → SHA-256 hex, sorted by path.
    pub artifacts: BTreeMap<String, String>,
}

/// SHA-256 of every file under `dir` except the top-level manifest itself.
pub fn checksums(dir: &Path) -> LabResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| LabError::Io {
            path: dir.display().to_string(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walkdir stays under its root");
        if rel == Path::new(MANIFEST) {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| LabError::io(entry.path(), e))?;
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// Checksum `dir` and write its manifest. No timestamps, so reruns are byte-identical.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig) -> LabResult<Manifest> {
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        artifacts: checksums(dir)?,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(mjp_core::Error::from)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
    Ok(manifest)
}
