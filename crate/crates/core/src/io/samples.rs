use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctmc::{GeneratorMatrix, InitialDistribution};
use crate::outcome::{ClusterParams, Family, OutcomeModel};
use crate::sampler::PosteriorSample;

use super::{write_atomic, IoError};

/// Parameters of one cluster as written to the samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub pi: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub family: Family,
    /// Outcome mean (Gaussian) or rate (Poisson) per state and factor level.
    pub theta: Vec<Vec<f64>>,
}

/// One retained iteration; labels are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub iteration: u64,
    pub num_clusters: usize,
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterRecord>,
}

impl From<&ClusterParams> for ClusterRecord {
    fn from(p: &ClusterParams) -> Self {
        let o = &p.outcome;
        Self {
            pi: p.pi.probs().to_vec(),
            q: p.q.to_rows(),
            family: o.family,
            theta: (0..o.num_states).map(|s| (0..o.num_levels).map(|l| o.cell(s, l)).collect()).collect(),
        }
    }
}

impl ClusterRecord {
    pub fn to_params(&self) -> Result<ClusterParams, String> {
        let k = self.pi.len();
        let levels = self.theta.first().map_or(0, Vec::len);
        let cells = self.theta.iter().flatten().copied().collect();
        Ok(ClusterParams {
            pi: InitialDistribution::new(self.pi.clone()).map_err(|e| e.to_string())?,
            q: GeneratorMatrix::from_rows(&self.q).map_err(|e| e.to_string())?,
            outcome: OutcomeModel::new(self.family, k, levels, cells).map_err(|e| e.to_string())?,
        })
    }
}

impl From<&PosteriorSample> for SampleRecord {
    fn from(s: &PosteriorSample) -> Self {
        Self {
            iteration: s.iteration,
            num_clusters: s.num_clusters,
            labels: s.labels.iter().map(|l| l + 1).collect(),
            clusters: s.clusters.iter().map(ClusterRecord::from).collect(),
        }
    }
}

impl SampleRecord {
    pub fn to_sample(&self) -> Result<PosteriorSample, String> {
        if self.labels.iter().any(|&l| l == 0 || l > self.num_clusters) || self.clusters.len() != self.num_clusters {
            return Err("labels and clusters disagree".into());
        }
        Ok(PosteriorSample {
            iteration: self.iteration,
            num_clusters: self.num_clusters,
            labels: self.labels.iter().map(|l| l - 1).collect(),
            clusters: self.clusters.iter().map(ClusterRecord::to_params).collect::<Result<_, _>>()?,
        })
    }
}

/// JSON-lines writer flushed after every record, so a checkpoint never
/// runs ahead of the samples on disk.
pub struct SampleWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl SampleWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    /// Reopens an existing file for a resumed run, dropping records after
    /// `iteration` (written after the checkpoint was taken).
    pub fn resume(path: &Path, iteration: u64) -> Result<Self, IoError> {
        let kept: Vec<String> = if path.exists() {
            let file = File::open(path).map_err(|e| IoError::io(path, e))?;
            let mut kept = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| IoError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SampleRecord = serde_json::from_str(&line)
                    .map_err(|e| IoError::SampleParse { line: i + 1, message: e.to_string() })?;
                if rec.iteration <= iteration {
                    kept.push(line);
                }
            }
            kept
        } else {
            Vec::new()
        };
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, sample: &PosteriorSample) -> Result<(), IoError> {
        let line = serde_json::to_string(&SampleRecord::from(sample)).expect("sample serializes");
        writeln!(self.out, "{line}").map_err(|e| IoError::io(&self.path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<(), IoError> {
        self.out.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<PosteriorSample>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |m: String| IoError::SampleParse { line: i + 1, message: m };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(rec.to_sample().map_err(parse)?);
    }
    if out.is_empty() {
        return Err(IoError::EmptySamples(path.to_path_buf()));
    }
    Ok(out)
}
