//! Posterior summaries: cluster-count modes, label alignment,
//! misclassification, effective sample sizes, transition-probability curves,
//! eigenvalue tables and parameter errors.

use nalgebra::DMatrix;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{generator_eigenvalues, transition_matrix, CtmcError, GeneratorMatrix, InitialDistribution};
use crate::outcome::{ClusterParams, Family, OutcomeError, OutcomeModel};
use crate::sampler::PosteriorSample;

/// Label counts up to which misclassification is minimized by enumeration.
pub const EXHAUSTIVE_LABEL_LIMIT: usize = 8;
pub const MIN_ESS_LENGTH: usize = 10;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty cluster-count trace")]
    EmptyTrace,
    #[error("no posterior samples")]
    EmptySamples,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series of length {len} is shorter than {min}")]
    TooShort { len: usize, min: usize },
    #[error("series has zero variance")]
    ConstantSeries,
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
}

/// Cluster counts and label snapshots of successive retained iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrace {
    pub counts: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
}

impl ClusterTrace {
    pub fn new(counts: Vec<usize>, labels: Vec<Vec<usize>>) -> Result<Self, DiagnosticsError> {
        if counts.len() != labels.len() {
            return Err(DiagnosticsError::LengthMismatch { left: counts.len(), right: labels.len() });
        }
        Ok(Self { counts, labels })
    }

    pub fn from_samples(samples: &[PosteriorSample]) -> Self {
        Self {
            counts: samples.iter().map(|s| s.num_clusters).collect(),
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        }
    }

    /// `(count, iterations)` pairs in increasing count order.
    pub fn count_table(&self) -> Vec<(usize, usize)> {
        let mut table = std::collections::BTreeMap::new();
        for &c in &self.counts {
            *table.entry(c).or_insert(0usize) += 1;
        }
        table.into_iter().collect()
    }
}

/// Most frequent cluster count and its share of the trace; ties go to the
/// smaller count.
pub fn modal_cluster_count(counts: &[usize]) -> Result<(usize, f64), DiagnosticsError> {
    if counts.is_empty() {
        return Err(DiagnosticsError::EmptyTrace);
    }
    let trace = ClusterTrace { counts: counts.to_vec(), labels: vec![Vec::new(); counts.len()] };
    let (count, hits) = trace
        .count_table()
        .into_iter()
        .fold((0, 0), |best, (c, n)| if n > best.1 { (c, n) } else { best });
    Ok((count, hits as f64 / counts.len() as f64))
}

fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen = std::collections::BTreeMap::new();
    for &l in labels {
        let next = seen.len();
        seen.entry(l).or_insert(next);
    }
    // Re-index in sorted label order so the result does not depend on order
    // of appearance.
    let sorted: std::collections::BTreeMap<usize, usize> =
        seen.keys().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels.iter().map(|l| sorted[l]).collect(), sorted.len())
}

fn overlap_matrix(a: &[usize], na: usize, b: &[usize], nb: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; nb]; na];
    for (&x, &y) in a.iter().zip(b) {
        m[x][y] += 1;
    }
    m
}

fn best_permutation_exhaustive(weights: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let n = weights.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (weights.iter().enumerate().map(|(i, r)| r[perm[i]]).sum(), perm.clone());
    // Heap's algorithm over all n! assignments.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let score: usize = weights.iter().enumerate().map(|(r, row)| row[perm[r]]).sum();
            if score > best.0 {
                best = (score, perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Matching of estimated labels to true labels maximizing agreement.
/// Returns, for each estimated label (in sorted order of the distinct
/// estimated labels), its matched true label if any, and the number of
/// agreements.
pub fn best_label_matching(
    estimated: &[usize],
    truth: &[usize],
) -> Result<(Vec<Option<usize>>, usize), DiagnosticsError> {
    if estimated.len() != truth.len() {
        return Err(DiagnosticsError::LengthMismatch { left: estimated.len(), right: truth.len() });
    }
    let (est, ne) = dense_labels(estimated);
    let (tru, nt) = dense_labels(truth);
    let mut true_values: Vec<usize> = truth.to_vec();
    true_values.sort_unstable();
    true_values.dedup();
    let n = ne.max(nt);
    if n == 0 {
        return Ok((Vec::new(), 0));
    }
    let weights = overlap_matrix(&est, n, &tru, n);
    let (score, perm) = if n <= EXHAUSTIVE_LABEL_LIMIT {
        best_permutation_exhaustive(&weights)
    } else {
        let m = Matrix::from_rows(weights.iter().map(|r| r.iter().map(|&v| v as i64).collect::<Vec<_>>()))
            .expect("square overlap matrix");
        let (s, p) = kuhn_munkres(&m);
        (s as usize, p)
    };
    let mapping = (0..ne).map(|e| (perm[e] < nt).then(|| true_values[perm[e]])).collect();
    Ok((mapping, score))
}

/// Smallest fraction of subjects whose estimated label disagrees with the
/// truth over injective relabelings; estimated labels beyond the number of
/// true labels count as errors.
pub fn align_and_misclassify(estimated: &[usize], truth: &[usize]) -> Result<f64, DiagnosticsError> {
    if estimated.is_empty() && truth.is_empty() {
        return Ok(0.0);
    }
    let (_, agree) = best_label_matching(estimated, truth)?;
    Ok((estimated.len() - agree) as f64 / estimated.len() as f64)
}

/// Sample autocorrelations at lags `0..n` via a zero-padded FFT.
pub fn autocorrelation(series: &[f64]) -> Result<Vec<f64>, DiagnosticsError> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    let scale = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(c0 > n as f64 * (1e-12 * scale).powi(2)) || c0 == 0.0 {
        return Err(DiagnosticsError::ConstantSeries);
    }
    Ok(buf[..n].iter().map(|z| z.re / c0).collect())
}

/// `n / tau` with the integrated autocorrelation time `tau` truncated by the
/// initial monotone positive sequence of paired autocorrelations.
pub fn effective_sample_size(series: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = series.len();
    if n < MIN_ESS_LENGTH {
        return Err(DiagnosticsError::TooShort { len: n, min: MIN_ESS_LENGTH });
    }
    let rho = autocorrelation(series)?;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let mut pair = rho[2 * m] + rho[2 * m + 1];
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        m += 1;
    }
    let ess = n as f64 / tau.max(f64::MIN_POSITIVE);
    Ok(ess.clamp(f64::MIN_POSITIVE, n as f64))
}

/// Central credible interval by linearly interpolated empirical quantiles.
pub fn credible_interval(values: &[f64], level: f64) -> Option<(f64, f64)> {
    if values.is_empty() || !(0.0..=1.0).contains(&level) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let tail = (1.0 - level) / 2.0;
    Some((q(tail), q(1.0 - tail)))
}

/// Posterior-mean transition probabilities on an even time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCurves {
    pub times: Vec<f64>,
    pub mean: Vec<DMatrix<f64>>,
}

pub fn transition_probability_curves(
    samples: &[&GeneratorMatrix],
    horizon: f64,
    grid_points: usize,
) -> Result<TransitionCurves, DiagnosticsError> {
    let first = samples.first().ok_or(DiagnosticsError::EmptySamples)?;
    let k = first.dim();
    if samples.iter().any(|q| q.dim() != k) {
        return Err(DiagnosticsError::DimensionMismatch("generators of different sizes".into()));
    }
    if grid_points == 0 || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(DiagnosticsError::DimensionMismatch("need a nonempty grid on a finite horizon".into()));
    }
    let times: Vec<f64> = if grid_points == 1 {
        vec![0.0]
    } else {
        (0..grid_points).map(|i| horizon * i as f64 / (grid_points - 1) as f64).collect()
    };
    let per_sample: Vec<Vec<DMatrix<f64>>> = samples
        .par_iter()
        .map(|q| times.iter().map(|&t| transition_matrix(q, t).map(|p| p.matrix().clone())).collect())
        .collect::<Result<_, _>>()?;
    let mut mean = vec![DMatrix::zeros(k, k); times.len()];
    for curves in &per_sample {
        for (acc, p) in mean.iter_mut().zip(curves) {
            *acc += p;
        }
    }
    let count = samples.len() as f64;
    for m in mean.iter_mut() {
        *m /= count;
    }
    Ok(TransitionCurves { times, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormErrors {
    pub pi: f64,
    pub b: f64,
    pub q: f64,
}

/// Euclidean error of `pi`, Frobenius errors of the coefficient matrix and
/// the generator.
pub fn param_norm_error(truth: &ClusterParams, estimate: &ClusterParams) -> Result<NormErrors, DiagnosticsError> {
    let k = truth.pi.dim();
    if estimate.pi.dim() != k
        || estimate.q.dim() != k
        || truth.outcome.num_levels != estimate.outcome.num_levels
        || truth.outcome.num_states != estimate.outcome.num_states
    {
        return Err(DiagnosticsError::DimensionMismatch("truth and estimate differ in shape".into()));
    }
    let pi = truth.pi.probs().iter().zip(estimate.pi.probs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let b = truth
        .outcome
        .coefficients()
        .iter()
        .flatten()
        .zip(estimate.outcome.coefficients().iter().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let q = (truth.q.matrix() - estimate.q.matrix()).norm();
    Ok(NormErrors { pi, b, q })
}

/// Modal-count iterations aligned to a common labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalAssignment {
    pub modal_count: usize,
    pub fraction: f64,
    /// Zero-based aligned label of each subject.
    pub labels: Vec<usize>,
    /// Indices into the sample list of the modal-count iterations.
    pub sample_indices: Vec<usize>,
    /// Per modal-count iteration: aligned label of each sample label.
    pub mappings: Vec<Vec<usize>>,
}

/// Greedy maximum-overlap map from `labels` onto `reference`, both with
/// `m` clusters; ties favour smaller labels.
pub fn greedy_overlap_alignment(labels: &[usize], reference: &[usize], m: usize) -> Vec<usize> {
    let overlap = overlap_matrix(labels, m, reference, m);
    let mut mapping = vec![usize::MAX; m];
    let mut used = vec![false; m];
    for _ in 0..m {
        let mut best: Option<(usize, usize, usize)> = None;
        for a in (0..m).filter(|&a| mapping[a] == usize::MAX) {
            for b in (0..m).filter(|&b| !used[b]) {
                if best.is_none_or(|(_, _, v)| overlap[a][b] > v) {
                    best = Some((a, b, overlap[a][b]));
                }
            }
        }
        let (a, b, _) = best.expect("unmatched label remains");
        mapping[a] = b;
        used[b] = true;
    }
    mapping
}

/// Per-subject posterior modal label among iterations with the modal number
/// of clusters, after aligning each to the last such iteration.
pub fn modal_assignments(samples: &[PosteriorSample]) -> Result<ModalAssignment, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptySamples);
    }
    let counts: Vec<usize> = samples.iter().map(|s| s.num_clusters).collect();
    let (modal_count, fraction) = modal_cluster_count(&counts)?;
    let sample_indices: Vec<usize> = (0..samples.len()).filter(|&i| counts[i] == modal_count).collect();
    let reference = &samples[*sample_indices.last().expect("modal count occurs")].labels;
    let n = reference.len();
    if samples.iter().any(|s| s.labels.len() != n) {
        return Err(DiagnosticsError::DimensionMismatch("samples disagree on the number of subjects".into()));
    }
    let mappings: Vec<Vec<usize>> = sample_indices
        .par_iter()
        .map(|&i| greedy_overlap_alignment(&samples[i].labels, reference, modal_count))
        .collect();
    let mut tallies = vec![vec![0usize; modal_count]; n];
    for (&i, map) in sample_indices.iter().zip(&mappings) {
        for (f, &l) in samples[i].labels.iter().enumerate() {
            tallies[f][map[l]] += 1;
        }
    }
    let labels = tallies
        .iter()
        .map(|t| t.iter().enumerate().fold((0, 0), |b, (l, &v)| if v > b.1 { (l, v) } else { b }).0)
        .collect();
    Ok(ModalAssignment { modal_count, fraction, labels, sample_indices, mappings })
}

/// Aligned parameter draws of each cluster across modal-count iterations.
pub fn aligned_cluster_draws<'a>(
    samples: &'a [PosteriorSample],
    assignment: &ModalAssignment,
) -> Vec<Vec<&'a ClusterParams>> {
    let mut draws = vec![Vec::with_capacity(assignment.sample_indices.len()); assignment.modal_count];
    for (&i, map) in assignment.sample_indices.iter().zip(&assignment.mappings) {
        let mut inverse = vec![0; map.len()];
        for (a, &b) in map.iter().enumerate() {
            inverse[b] = a;
        }
        for (r, slot) in draws.iter_mut().enumerate() {
            slot.push(&samples[i].clusters[inverse[r]]);
        }
    }
    draws
}

/// Posterior means of `pi`, `Q` and the link-scale coefficients; the
/// returned cells are the inverse link of the mean coefficients.
pub fn posterior_mean_params(draws: &[&ClusterParams]) -> Result<ClusterParams, DiagnosticsError> {
    let first = draws.first().ok_or(DiagnosticsError::EmptySamples)?;
    let k = first.pi.dim();
    let n = draws.len() as f64;
    let mut pi = vec![0.0; k];
    let mut q = DMatrix::zeros(k, k);
    let coef0 = first.outcome.coefficients();
    let mut coef = vec![vec![0.0; k]; coef0.len()];
    for d in draws {
        for (acc, v) in pi.iter_mut().zip(d.pi.probs()) {
            *acc += v / n;
        }
        q += d.q.matrix() / n;
        for (row, drow) in coef.iter_mut().zip(d.outcome.coefficients()) {
            for (acc, v) in row.iter_mut().zip(drow) {
                *acc += v / n;
            }
        }
    }
    let outcome = outcome_from_coefficients(first.outcome.family, &coef)?;
    Ok(ClusterParams {
        pi: InitialDistribution::normalized(pi)?,
        q: GeneratorMatrix::new(q)?,
        outcome,
    })
}

/// Inverse of [`OutcomeModel::coefficients`].
pub fn outcome_from_coefficients(family: Family, coef: &[Vec<f64>]) -> Result<OutcomeModel, DiagnosticsError> {
    let levels = coef.len();
    let k = coef.first().map_or(0, |r| r.len());
    let mut cells = Vec::with_capacity(k * levels);
    for s in 0..k {
        for l in 0..levels {
            let eta = coef[0][s] + if l > 0 { coef[l][s] } else { 0.0 };
            cells.push(match family {
                Family::Poisson => eta.exp(),
                Family::Gaussian { .. } => eta,
            });
        }
    }
    Ok(OutcomeModel::new(family, k, levels, cells)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub cluster: usize,
    /// `pi`, `q`, `theta` or `b`.
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn named_series(p: &ClusterParams) -> Vec<(&'static str, usize, usize, f64)> {
    let k = p.pi.dim();
    let mut out = Vec::new();
    for (i, &v) in p.pi.probs().iter().enumerate() {
        out.push(("pi", i, 0, v));
    }
    for l in 0..k {
        for m in (0..k).filter(|&m| m != l) {
            out.push(("q", l, m, p.q.rate(l, m)));
        }
    }
    for s in 0..p.outcome.num_states {
        for l in 0..p.outcome.num_levels {
            out.push(("theta", s, l, p.outcome.cell(s, l)));
        }
    }
    for (r, row) in p.outcome.coefficients().iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            out.push(("b", r, s, v));
        }
    }
    out
}

/// Posterior means and central credible intervals of every parameter of
/// every aligned cluster.
pub fn summarize_params(cluster_draws: &[Vec<&ClusterParams>], level: f64) -> Vec<ParamSummary> {
    let mut rows = Vec::new();
    for (c, draws) in cluster_draws.iter().enumerate() {
        let series: Vec<Vec<(&'static str, usize, usize, f64)>> = draws.iter().map(|p| named_series(p)).collect();
        let Some(first) = series.first() else { continue };
        for (j, &(block, row, col, _)) in first.iter().enumerate() {
            let values: Vec<f64> = series.iter().map(|s| s[j].3).collect();
            let (lower, upper) = credible_interval(&values, level).expect("nonempty draws");
            rows.push(ParamSummary {
                cluster: c,
                block: block.to_string(),
                row,
                col,
                mean: values.iter().sum::<f64>() / values.len() as f64,
                lower,
                upper,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssRow {
    pub cluster: usize,
    pub from: usize,
    pub to: usize,
    /// `None` when the chain is too short or constant.
    pub ess: Option<f64>,
}

/// Effective sample sizes of every off-diagonal rate of every aligned
/// cluster.
pub fn ess_table(cluster_draws: &[Vec<&ClusterParams>]) -> Vec<EssRow> {
    let mut rows = Vec::new();
    for (c, draws) in cluster_draws.iter().enumerate() {
        let Some(first) = draws.first() else { continue };
        let k = first.q.dim();
        for l in 0..k {
            for m in (0..k).filter(|&m| m != l) {
                let series: Vec<f64> = draws.iter().map(|p| p.q.rate(l, m)).collect();
                rows.push(EssRow { cluster: c, from: l, to: m, ess: effective_sample_size(&series).ok() });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub iteration: u64,
    pub cluster: usize,
    pub index: usize,
    pub re: f64,
    pub im: f64,
}

/// Generator eigenvalues of every aligned cluster in every modal-count
/// iteration.
pub fn eigenvalue_table(
    samples: &[PosteriorSample],
    assignment: &ModalAssignment,
) -> Result<Vec<EigenRow>, DiagnosticsError> {
    let per: Vec<Vec<EigenRow>> = assignment
        .sample_indices
        .par_iter()
        .zip(&assignment.mappings)
        .map(|(&i, map)| {
            let s = &samples[i];
            let mut rows = Vec::new();
            let mut inverse = vec![0; map.len()];
            for (a, &b) in map.iter().enumerate() {
                inverse[b] = a;
            }
            for (c, &a) in inverse.iter().enumerate() {
                for (index, z) in generator_eigenvalues(&s.clusters[a].q)?.into_iter().enumerate() {
                    rows.push(EigenRow { iteration: s.iteration, cluster: c, index, re: z.re, im: z.im });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, DiagnosticsError>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub modal_count: usize,
    pub modal_fraction: f64,
    pub count_table: Vec<(usize, usize)>,
    pub assignments: Vec<usize>,
    pub params: Vec<ParamSummary>,
    pub ess: Vec<EssRow>,
}

pub fn summarize_fit(samples: &[PosteriorSample]) -> Result<FitSummary, DiagnosticsError> {
    let assignment = modal_assignments(samples)?;
    let draws = aligned_cluster_draws(samples, &assignment);
    Ok(FitSummary {
        modal_count: assignment.modal_count,
        modal_fraction: assignment.fraction,
        count_table: ClusterTrace::from_samples(samples).count_table(),
        params: summarize_params(&draws, 0.95),
        ess: ess_table(&draws),
        assignments: assignment.labels,
    })
}

/// Norm errors of each true cluster against the posterior mean of the
/// fitted cluster it is matched to through the modal assignments.
pub fn truth_norm_errors(
    samples: &[PosteriorSample],
    assignment: &ModalAssignment,
    truth_labels: &[usize],
    truth_params: &[ClusterParams],
) -> Result<Vec<(usize, Option<NormErrors>)>, DiagnosticsError> {
    let (mapping, _) = best_label_matching(&assignment.labels, truth_labels)?;
    let mut present: Vec<usize> = assignment.labels.clone();
    present.sort_unstable();
    present.dedup();
    let draws = aligned_cluster_draws(samples, assignment);
    let mut out: Vec<(usize, Option<NormErrors>)> = (0..truth_params.len()).map(|t| (t, None)).collect();
    for (e, t) in present.iter().zip(&mapping) {
        if let Some(t) = *t {
            if t < truth_params.len() {
                let est = posterior_mean_params(&draws[*e])?;
                out[t].1 = Some(param_norm_error(&truth_params[t], &est)?);
            }
        }
    }
    Ok(out)
}
