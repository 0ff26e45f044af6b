//! Scaled forward–backward smoothing on a subject's observation grid.

use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use thiserror::Error;

use crate::ctmc::{transition_matrix, CtmcError, GeneratorMatrix, InitialDistribution, StochasticMatrix};
use crate::data::{DataError, SubjectRecord};
use crate::outcome::{outcome_log_density, OutcomeError, OutcomeModel};
use crate::rng::categorical;

/// Interval lengths are bucketed at this resolution for transition caching.
pub const DELTA_QUANTUM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmmError {
    #[error("observation {index} of subject {id} has zero density under every state")]
    ZeroLikelihood { id: String, index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("interval index {index} out of range for {intervals} intervals")]
    IntervalOutOfRange { index: usize, intervals: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
}

/// Posterior state and pair marginals of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingResult {
    /// `T x K`, row `t` is `P(state at t | all outcomes)`.
    pub state_marginals: Vec<Vec<f64>>,
    /// `T - 1` row-major `K x K` blocks, `P(state t = k, state t+1 = j | outcomes)`.
    pub pair_marginals: Vec<Vec<f64>>,
    pub loglik: f64,
    /// Log normalizers of the forward pass; they sum to `loglik`.
    pub log_scalers: Vec<f64>,
    pub num_states: usize,
}

impl SmoothingResult {
    pub fn len(&self) -> usize {
        self.state_marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_marginals.is_empty()
    }

    pub fn pair(&self, t: usize, k: usize, j: usize) -> f64 {
        self.pair_marginals[t][k * self.num_states + j]
    }
}

/// Transition matrices of one generator memoized by interval length.
#[derive(Debug)]
pub struct TransitionCache {
    q: GeneratorMatrix,
    entries: DashMap<u64, Arc<StochasticMatrix>>,
}

impl TransitionCache {
    pub fn new(q: GeneratorMatrix) -> Self {
        Self { q, entries: DashMap::new() }
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.q
    }

    pub fn get(&self, delta: f64) -> Result<Arc<StochasticMatrix>, CtmcError> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(CtmcError::NonFiniteInput("delta"));
        }
        let key = (delta / DELTA_QUANTUM).round() as u64;
        if let Some(p) = self.entries.get(&key) {
            return Ok(Arc::clone(&p));
        }
        let p = Arc::new(transition_matrix(&self.q, delta)?);
        self.entries.insert(key, Arc::clone(&p));
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Forward–backward for one subject under `(pi, Q, outcome)`.
pub fn forward_backward(
    subject: &SubjectRecord,
    pi: &InitialDistribution,
    q: &GeneratorMatrix,
    outcome: &OutcomeModel,
) -> Result<SmoothingResult, HmmError> {
    let cache = TransitionCache::new(q.clone());
    forward_backward_cached(subject, pi, &cache, outcome)
}

/// Forward–backward drawing transition matrices from a shared cache.
pub fn forward_backward_cached(
    subject: &SubjectRecord,
    pi: &InitialDistribution,
    cache: &TransitionCache,
    outcome: &OutcomeModel,
) -> Result<SmoothingResult, HmmError> {
    subject.validate()?;
    let transitions = subject
        .deltas()
        .map(|d| cache.get(d))
        .collect::<Result<Vec<_>, _>>()?;
    let log_dens = emission_log_densities(subject, outcome)?;
    smooth(subject, pi, &transitions, &log_dens)
}

/// `T x K` log outcome densities.
pub fn emission_log_densities(subject: &SubjectRecord, outcome: &OutcomeModel) -> Result<Vec<Vec<f64>>, HmmError> {
    (0..subject.len())
        .map(|t| {
            (0..outcome.num_states)
                .map(|k| outcome_log_density(outcome, subject.outcomes[t], k, subject.level(t)).map_err(HmmError::from))
                .collect()
        })
        .collect()
}

/// Scaled recursions given transition matrices and log emission densities.
pub fn smooth(
    subject: &SubjectRecord,
    pi: &InitialDistribution,
    transitions: &[Arc<StochasticMatrix>],
    log_dens: &[Vec<f64>],
) -> Result<SmoothingResult, HmmError> {
    let t_len = log_dens.len();
    let k = pi.dim();
    if t_len == 0 {
        return Err(DataError::NoObservations { id: subject.id.clone() }.into());
    }
    if transitions.len() + 1 != t_len {
        return Err(HmmError::DimensionMismatch(format!(
            "{} transition matrices for {t_len} observations",
            transitions.len()
        )));
    }
    if log_dens.iter().any(|row| row.len() != k) || transitions.iter().any(|p| p.dim() != k) {
        return Err(HmmError::DimensionMismatch(format!("expected {k} states")));
    }

    let zero = |index| HmmError::ZeroLikelihood { id: subject.id.clone(), index };
    // Shifted densities g[t][k] = exp(log f - max_k log f).
    let mut shifts = Vec::with_capacity(t_len);
    let mut g = Vec::with_capacity(t_len);
    for (t, row) in log_dens.iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(zero(t));
        }
        shifts.push(m);
        g.push(row.iter().map(|v| (v - m).exp()).collect::<Vec<f64>>());
    }

    let mut alpha = vec![vec![0.0; k]; t_len];
    let mut scale = vec![0.0; t_len];
    for j in 0..k {
        alpha[0][j] = pi.probs()[j] * g[0][j];
    }
    for t in 0..t_len {
        if t > 0 {
            let p = transitions[t - 1].matrix();
            for j in 0..k {
                let mut s = 0.0;
                for i in 0..k {
                    s += alpha[t - 1][i] * p[(i, j)];
                }
                alpha[t][j] = s * g[t][j];
            }
        }
        let c: f64 = alpha[t].iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(zero(t));
        }
        for v in alpha[t].iter_mut() {
            *v /= c;
        }
        scale[t] = c;
    }

    let mut beta = vec![vec![1.0; k]; t_len];
    for t in (0..t_len - 1).rev() {
        let p = transitions[t].matrix();
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..k {
                s += p[(i, j)] * g[t + 1][j] * beta[t + 1][j];
            }
            beta[t][i] = s / scale[t + 1];
        }
    }

    let mut pairs = Vec::with_capacity(t_len.saturating_sub(1));
    let mut marginals = Vec::with_capacity(t_len);
    for t in 0..t_len - 1 {
        let p = transitions[t].matrix();
        let mut block = vec![0.0; k * k];
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let v = alpha[t][i] * p[(i, j)] * g[t + 1][j] * beta[t + 1][j] / scale[t + 1];
                block[i * k + j] = v;
                total += v;
            }
        }
        for v in block.iter_mut() {
            *v /= total;
        }
        marginals.push((0..k).map(|i| block[i * k..(i + 1) * k].iter().sum()).collect());
        pairs.push(block);
    }
    marginals.push(alpha[t_len - 1].clone());

    let log_scalers: Vec<f64> = scale.iter().zip(&shifts).map(|(c, m)| c.ln() + m).collect();
    let loglik = log_scalers.iter().sum();
    Ok(SmoothingResult { state_marginals: marginals, pair_marginals: pairs, loglik, log_scalers, num_states: k })
}

/// Independent draw of each latent state from its smoothed marginal.
pub fn sample_latent_states<R: Rng + ?Sized>(sm: &SmoothingResult, rng: &mut R) -> Vec<usize> {
    sm.state_marginals
        .iter()
        .map(|a| categorical(a, rng).expect("state marginals are normalized"))
        .collect()
}

/// Draw of the `(state at t, state at t + 1)` pair from its smoothed joint.
pub fn sample_state_pairs<R: Rng + ?Sized>(
    sm: &SmoothingResult,
    t: usize,
    rng: &mut R,
) -> Result<(usize, usize), HmmError> {
    let block = sm
        .pair_marginals
        .get(t)
        .ok_or(HmmError::IntervalOutOfRange { index: t, intervals: sm.pair_marginals.len() })?;
    let idx = categorical(block, rng).expect("pair marginals are normalized");
    Ok((idx / sm.num_states, idx % sm.num_states))
}
