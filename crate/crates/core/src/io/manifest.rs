use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;

use super::{write_atomic, write_dataset_to, IoError};

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub dataset_sha256: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// SHA-256 of every output file, by file name.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C, dataset_sha256: String) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            dataset_sha256,
            timings: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hashes each file and records it under its file name.
    pub fn record_outputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<(), IoError> {
        for p in paths {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            self.outputs.insert(name, file_sha256(p)?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Hash of the dataset's canonical CSV form.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset_to(data, &mut buf).expect("in-memory write");
    hex_digest(&buf)
}
