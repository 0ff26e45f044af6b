//! Files: long-format CSV data, TOML configuration, binary checkpoints,
//! JSON-lines posterior samples, summary tables and run manifests.

mod checkpoint;
mod config;
mod data_csv;
mod manifest;
mod samples;
mod summary;
mod tables;

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConfigFile, ModelConfig, PriorConfig, SamplerSection, SimulationSection};
pub use data_csv::{read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use manifest::{dataset_fingerprint, file_sha256, RunManifest};
pub use samples::{read_samples, ClusterRecord, SampleRecord, SampleWriter};
pub use summary::{write_summary, SummaryOptions};
pub use tables::{read_truth, write_csv_rows, write_truth};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data row {row}: {message}")]
    DataParse { row: usize, message: String },
    #[error("unknown preset `{0}` (expected ex1-poisson, ex1-gaussian, ex2, ex3 or copd)")]
    UnknownPreset(String),
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("samples line {line}: {message}")]
    SampleParse { line: usize, message: String },
    #[error("no posterior samples in {0}")]
    EmptySamples(PathBuf),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Diagnostics(#[from] crate::diagnostics::DiagnosticsError),
    #[error("{0}")]
    Invalid(String),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(|e| IoError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}
