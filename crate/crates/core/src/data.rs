//! Longitudinal subject records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("subject {id}: observation times must be strictly increasing (index {index})")]
    NonMonotoneTimes { id: String, index: usize },
    #[error("subject {id}: {what} has length {got}, expected {expected}")]
    LengthMismatch { id: String, what: &'static str, expected: usize, got: usize },
    #[error("subject {id}: no observations")]
    NoObservations { id: String },
    #[error("subject {id}: non-finite {what} at index {index}")]
    NonFinite { id: String, what: &'static str, index: usize },
    #[error("dataset has no subjects")]
    EmptyDataset,
}

/// One individual's observation times, outcomes and optional factor levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub outcomes: Vec<f64>,
    /// Zero-based factor level per observation.
    pub levels: Option<Vec<usize>>,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        outcomes: Vec<f64>,
        levels: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let record = Self { id: id.into(), times, outcomes, levels };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let id = || self.id.clone();
        if self.times.is_empty() {
            return Err(DataError::NoObservations { id: id() });
        }
        if self.outcomes.len() != self.times.len() {
            return Err(DataError::LengthMismatch {
                id: id(),
                what: "outcomes",
                expected: self.times.len(),
                got: self.outcomes.len(),
            });
        }
        if let Some(levels) = &self.levels {
            if levels.len() != self.times.len() {
                return Err(DataError::LengthMismatch {
                    id: id(),
                    what: "levels",
                    expected: self.times.len(),
                    got: levels.len(),
                });
            }
        }
        for (i, (t, o)) in self.times.iter().zip(&self.outcomes).enumerate() {
            if !t.is_finite() {
                return Err(DataError::NonFinite { id: id(), what: "time", index: i });
            }
            if !o.is_finite() {
                return Err(DataError::NonFinite { id: id(), what: "outcome", index: i });
            }
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(DataError::NonMonotoneTimes { id: id(), index: i + 1 });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn level(&self, t: usize) -> usize {
        self.levels.as_ref().map_or(0, |l| l[t])
    }

    /// Interval lengths `tau_{t+1} - tau_t`.
    pub fn deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.windows(2).map(|w| w[1] - w[0])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for s in &subjects {
            s.validate()?;
        }
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Number of factor levels (1 when no covariate is present).
    pub fn num_levels(&self) -> usize {
        self.subjects
            .iter()
            .filter_map(|s| s.levels.as_ref())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(1, |m| m + 1)
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }
}
