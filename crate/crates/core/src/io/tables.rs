use std::path::Path;

use serde::Serialize;

use crate::sim::SimTruth;

use super::{write_atomic, IoError};

/// Writes `rows` as a headed CSV table.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| IoError::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn write_truth(path: &Path, truth: &SimTruth) -> Result<(), IoError> {
    let text = serde_json::to_string(truth).expect("truth serializes");
    write_atomic(path, text.as_bytes())
}

pub fn read_truth(path: &Path) -> Result<SimTruth, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
}
