use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::diagnostics::{
    aligned_cluster_draws, align_and_misclassify, eigenvalue_table, ess_table, modal_assignments, summarize_params,
    transition_probability_curves, truth_norm_errors, ClusterTrace,
};
use crate::sampler::PosteriorSample;
use crate::sim::SimTruth;

use super::{write_csv_rows, IoError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryOptions {
    /// Last time of the transition-probability grid.
    pub horizon: f64,
    pub grid_points: usize,
    /// Credible-interval mass.
    pub level: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self { horizon: 15.0, grid_points: 61, level: 0.95 }
    }
}

#[derive(Serialize)]
struct CountRow {
    clusters: usize,
    iterations: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct AssignmentRow<'a> {
    subject: usize,
    subject_id: &'a str,
    cluster: usize,
}

#[derive(Serialize)]
struct ParamRow<'a> {
    cluster: usize,
    block: &'a str,
    row: usize,
    col: usize,
    mean: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct EssOut {
    cluster: usize,
    from: usize,
    to: usize,
    ess: Option<f64>,
}

#[derive(Serialize)]
struct CurveRow {
    cluster: usize,
    time: f64,
    from: usize,
    to: usize,
    probability: f64,
}

#[derive(Serialize)]
struct EigenOut {
    iteration: u64,
    cluster: usize,
    index: usize,
    re: f64,
    im: f64,
}

#[derive(Serialize)]
struct MisclassRow {
    modal_count: usize,
    modal_fraction: f64,
    misclassification: f64,
}

#[derive(Serialize)]
struct NormRow {
    true_cluster: usize,
    pi: Option<f64>,
    b: Option<f64>,
    q: Option<f64>,
}

/// Writes every summary table into `dir` and returns the written paths.
/// Clusters, states and subjects are numbered from 1 in the tables.
pub fn write_summary(
    samples: &[PosteriorSample],
    subject_ids: Option<&[String]>,
    truth: Option<&SimTruth>,
    dir: &Path,
    opts: SummaryOptions,
) -> Result<Vec<PathBuf>, IoError> {
    let assignment = modal_assignments(samples)?;
    let draws = aligned_cluster_draws(samples, &assignment);
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<(), IoError>| -> Result<(), IoError> {
        let p = dir.join(name);
        f(&p)?;
        written.push(p);
        Ok(())
    };

    let n = samples.len() as f64;
    let counts: Vec<CountRow> = ClusterTrace::from_samples(samples)
        .count_table()
        .into_iter()
        .map(|(clusters, iterations)| CountRow { clusters, iterations, fraction: iterations as f64 / n })
        .collect();
    emit("cluster_counts.csv", &|p| write_csv_rows(p, &counts))?;

    let rows: Vec<AssignmentRow> = assignment
        .labels
        .iter()
        .enumerate()
        .map(|(f, &c)| AssignmentRow {
            subject: f + 1,
            subject_id: subject_ids.and_then(|ids| ids.get(f)).map_or("", String::as_str),
            cluster: c + 1,
        })
        .collect();
    emit("assignments.csv", &|p| write_csv_rows(p, &rows))?;

    let params = summarize_params(&draws, opts.level);
    let rows: Vec<ParamRow> = params
        .iter()
        .map(|s| {
            // Coefficient rows count from 0 (intercept); other indices are states or levels.
            let row = if s.block == "b" { s.row } else { s.row + 1 };
            let col = if s.block == "pi" { 1 } else { s.col + 1 };
            ParamRow { cluster: s.cluster + 1, block: &s.block, row, col, mean: s.mean, lower: s.lower, upper: s.upper }
        })
        .collect();
    emit("params.csv", &|p| write_csv_rows(p, &rows))?;

    let rows: Vec<EssOut> = ess_table(&draws)
        .into_iter()
        .map(|r| EssOut { cluster: r.cluster + 1, from: r.from + 1, to: r.to + 1, ess: r.ess })
        .collect();
    emit("ess.csv", &|p| write_csv_rows(p, &rows))?;

    let mut curves = Vec::new();
    for (c, d) in draws.iter().enumerate() {
        let qs: Vec<_> = d.iter().map(|p| &p.q).collect();
        let tc = transition_probability_curves(&qs, opts.horizon, opts.grid_points)?;
        for (t, m) in tc.times.iter().zip(&tc.mean) {
            for from in 0..m.nrows() {
                for to in 0..m.ncols() {
                    curves.push(CurveRow { cluster: c + 1, time: *t, from: from + 1, to: to + 1, probability: m[(from, to)] });
                }
            }
        }
    }
    emit("transition_curves.csv", &|p| write_csv_rows(p, &curves))?;

    let rows: Vec<EigenOut> = eigenvalue_table(samples, &assignment)?
        .into_iter()
        .map(|r| EigenOut { iteration: r.iteration, cluster: r.cluster + 1, index: r.index + 1, re: r.re, im: r.im })
        .collect();
    emit("eigenvalues.csv", &|p| write_csv_rows(p, &rows))?;

    if let Some(truth) = truth {
        let rate = align_and_misclassify(&assignment.labels, &truth.labels)?;
        let row = [MisclassRow {
            modal_count: assignment.modal_count,
            modal_fraction: assignment.fraction,
            misclassification: rate,
        }];
        emit("misclassification.csv", &|p| write_csv_rows(p, &row))?;
        let rows: Vec<NormRow> = truth_norm_errors(samples, &assignment, &truth.labels, &truth.clusters)?
            .into_iter()
            .map(|(t, e)| NormRow { true_cluster: t + 1, pi: e.map(|e| e.pi), b: e.map(|e| e.b), q: e.map(|e| e.q) })
            .collect();
        emit("norm_errors.csv", &|p| write_csv_rows(p, &rows))?;
    }
    Ok(written)
}
