use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sampler::{MoveCounts, SamplerConfig, SamplerState};

use super::{write_atomic, IoError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTHMMDP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly: random streams are keyed by
/// seed and iteration, so the state and configuration suffice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SamplerConfig,
    pub dataset_sha256: String,
    pub state: SamplerState,
    pub moves: MoveCounts,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(1 << 16);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bincode::serialize_into(&mut bytes, checkpoint).map_err(|e| IoError::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(IoError::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| IoError::Checkpoint(e.to_string()))
}
