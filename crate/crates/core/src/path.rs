//! Latent jump-process paths over observation intervals and their
//! sufficient statistics (jump counts `N_lm`, occupancy times `R_l`).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ctmc::{transition_matrix, GeneratorMatrix};

/// Rejections allowed before switching to the uniformization sampler.
pub const MAX_REJECTIONS: usize = 10_000;
/// Intervals shorter than this are treated as instantaneous.
pub const DEGENERATE_DELTA: f64 = 1e-12;
/// Conditioning events rarer than this are reported as impossible.
pub const MIN_ENDPOINT_PROB: f64 = 1e-300;
const MAX_UNIFORMIZED_JUMPS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("state {state} out of range for {dim} states")]
    InvalidState { state: usize, dim: usize },
    #[error("endpoint {end} unreachable from {start} over delta={delta}")]
    ImpossibleEndpoint { start: usize, end: usize, delta: f64 },
    #[error("conditioned sampler exhausted for {start}->{end} over delta={delta}")]
    SamplerExhausted { start: usize, end: usize, delta: f64 },
    #[error("jump observed on zero-rate channel {from}->{to}")]
    ZeroRateWithJump { from: usize, to: usize },
    #[error("path statistics have dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Aggregated sufficient statistics of a path segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    dim: usize,
    /// Row-major `dim x dim` jump counts; the diagonal stays zero.
    jumps: Vec<u32>,
    holding: Vec<f64>,
    span: f64,
}

impl PathStats {
    pub fn empty(dim: usize) -> Self {
        Self { dim, jumps: vec![0; dim * dim], holding: vec![0.0; dim], span: 0.0 }
    }

    /// A path that sits in `state` for the whole `span`.
    pub fn stationary(dim: usize, state: usize, span: f64) -> Self {
        let mut s = Self::empty(dim);
        s.holding[state] = span;
        s.span = span;
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jumps(&self, from: usize, to: usize) -> u32 {
        self.jumps[from * self.dim + to]
    }

    pub fn holding(&self, state: usize) -> f64 {
        self.holding[state]
    }

    pub fn holding_times(&self) -> &[f64] {
        &self.holding
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn total_jumps(&self) -> u64 {
        self.jumps.iter().map(|&n| n as u64).sum()
    }

    pub fn jump_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.jumps(i, j) as f64)
    }

    fn record_jump(&mut self, from: usize, to: usize) {
        self.jumps[from * self.dim + to] += 1;
    }

    /// Adds another segment's statistics (concatenation of paths).
    pub fn accumulate(&mut self, other: &PathStats) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.jumps.iter_mut().zip(&other.jumps) {
            *a += b;
        }
        for (a, b) in self.holding.iter_mut().zip(&other.holding) {
            *a += b;
        }
        self.span += other.span;
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.dim;
        let mut out = Self::empty(k);
        for i in 0..k {
            out.holding[i] = self.holding[perm[i]];
            for j in 0..k {
                out.jumps[i * k + j] = self.jumps(perm[i], perm[j]);
            }
        }
        out.span = self.span;
        out
    }

    /// Builds statistics from explicit counts; used by tests and I/O.
    pub fn from_parts(jumps: DMatrix<u32>, holding: Vec<f64>) -> Self {
        let dim = holding.len();
        let mut s = Self::empty(dim);
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    s.jumps[i * dim + j] = jumps[(i, j)];
                }
            }
        }
        s.span = holding.iter().sum();
        s.holding = holding;
        s
    }
}

/// A path realization reduced to its endpoints and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub start_state: usize,
    pub end_state: usize,
    pub stats: PathStats,
}

fn check_inputs(q: &GeneratorMatrix, delta: f64, states: &[usize]) -> Result<(), PathError> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(PathError::NonFiniteInput("delta"));
    }
    if q.matrix().iter().any(|v| !v.is_finite()) {
        return Err(PathError::NonFiniteInput("generator"));
    }
    for &s in states {
        if s >= q.dim() {
            return Err(PathError::InvalidState { state: s, dim: q.dim() });
        }
    }
    Ok(())
}

fn choose_jump<R: Rng + ?Sized>(q: &GeneratorMatrix, from: usize, rng: &mut R) -> usize {
    let exit = q.exit_rate(from);
    let mut u = rng.random::<f64>() * exit;
    let mut last = from;
    for to in 0..q.dim() {
        if to == from {
            continue;
        }
        let r = q.rate(from, to);
        if r <= 0.0 {
            continue;
        }
        last = to;
        if u < r {
            return to;
        }
        u -= r;
    }
    last
}

/// Runs the chain from `state` at time `t` to `delta`, accumulating into `stats`.
fn run_forward<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    mut t: f64,
    delta: f64,
    mut state: usize,
    stats: &mut PathStats,
    rng: &mut R,
) -> usize {
    loop {
        let exit = q.exit_rate(state);
        if exit <= 0.0 {
            stats.holding[state] += delta - t;
            return state;
        }
        let hold: f64 = rng.sample::<f64, _>(Exp1) / exit;
        if t + hold >= delta {
            stats.holding[state] += delta - t;
            return state;
        }
        stats.holding[state] += hold;
        t += hold;
        let next = choose_jump(q, state, rng);
        stats.record_jump(state, next);
        state = next;
    }
}

/// Unconditioned realization of the jump chain over `[0, delta)`.
pub fn simulate_forward_path<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    delta: f64,
    start: usize,
    rng: &mut R,
) -> Result<SampledPath, PathError> {
    check_inputs(q, delta, &[start])?;
    let mut stats = PathStats::empty(q.dim());
    stats.span = delta;
    let end = run_forward(q, 0.0, delta, start, &mut stats, rng);
    Ok(SampledPath { start_state: start, end_state: end, stats })
}

/// Draws path statistics from the law of the chain on `[0, delta)` given
/// `X_0 = start` and `X_delta = end`.
///
/// Modified rejection sampling: when `start != end` the first holding time
/// is drawn from the exponential truncated to `[0, delta)`, which forces at
/// least one jump. After [`MAX_REJECTIONS`] failures the uniformization
/// sampler takes over.
pub fn simulate_conditioned_path<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    delta: f64,
    start: usize,
    end: usize,
    rng: &mut R,
) -> Result<PathStats, PathError> {
    check_inputs(q, delta, &[start, end])?;
    let k = q.dim();
    if delta <= DEGENERATE_DELTA {
        return if start == end {
            Ok(PathStats::stationary(k, start, delta))
        } else {
            Err(PathError::ImpossibleEndpoint { start, end, delta })
        };
    }
    if !q.reachable(start)[end] {
        return Err(PathError::ImpossibleEndpoint { start, end, delta });
    }
    let exit = q.exit_rate(start);
    if exit <= 0.0 {
        // Reachability already ruled out start != end.
        return Ok(PathStats::stationary(k, start, delta));
    }

    // P(at least one jump in [0, delta)).
    let jump_mass = -(-exit * delta).exp_m1();
    for _ in 0..MAX_REJECTIONS {
        let mut stats = PathStats::empty(k);
        stats.span = delta;
        let reached = if start == end {
            run_forward(q, 0.0, delta, start, &mut stats, rng)
        } else {
            let u: f64 = rng.random();
            let first = -(-u * jump_mass).ln_1p() / exit;
            let first = first.min(delta);
            stats.holding[start] += first;
            let next = choose_jump(q, start, rng);
            stats.record_jump(start, next);
            run_forward(q, first, delta, next, &mut stats, rng)
        };
        if reached == end {
            return Ok(stats);
        }
    }
    uniformization_path(q, delta, start, end, rng)
}

/// Endpoint-conditioned sampling by uniformization (Hobolth & Stone 2009).
pub fn uniformization_path<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    delta: f64,
    start: usize,
    end: usize,
    rng: &mut R,
) -> Result<PathStats, PathError> {
    check_inputs(q, delta, &[start, end])?;
    let k = q.dim();
    let mu = q.max_exit_rate();
    if mu <= 0.0 || delta <= DEGENERATE_DELTA {
        return if start == end {
            Ok(PathStats::stationary(k, start, delta))
        } else {
            Err(PathError::ImpossibleEndpoint { start, end, delta })
        };
    }
    let p_end = transition_matrix(q, delta)
        .map_err(|_| PathError::NonFiniteInput("generator"))?
        .prob(start, end);
    if p_end < MIN_ENDPOINT_PROB {
        return Err(PathError::ImpossibleEndpoint { start, end, delta });
    }
    let ident = DMatrix::<f64>::identity(k, k);
    let r = &ident + q.matrix() / mu;
    let lambda = mu * delta;

    // Number of (possibly virtual) jumps given both endpoints.
    let target = rng.random::<f64>() * p_end;
    let mut powers = vec![ident];
    let mut acc = 0.0;
    let mut n = 0usize;
    loop {
        let log_pois = -lambda + n as f64 * lambda.ln() - ln_gamma(n as f64 + 1.0);
        acc += log_pois.exp() * powers[n][(start, end)];
        if acc >= target {
            break;
        }
        if n >= MAX_UNIFORMIZED_JUMPS || (n as f64 > lambda && log_pois < -745.0) {
            return Err(PathError::SamplerExhausted { start, end, delta });
        }
        let next = &powers[n] * &r;
        powers.push(next);
        n += 1;
    }

    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * delta).collect();
    times.sort_by(f64::total_cmp);

    let mut stats = PathStats::empty(k);
    stats.span = delta;
    let mut state = start;
    let mut last_t = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let remaining = n - i - 1;
        let weights: Vec<f64> =
            (0..k).map(|c| r[(state, c)] * powers[remaining][(c, end)]).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(PathError::SamplerExhausted { start, end, delta });
        }
        let mut u = rng.random::<f64>() * total;
        let mut next = k - 1;
        for (c, w) in weights.iter().enumerate() {
            if u < *w {
                next = c;
                break;
            }
            u -= w;
        }
        if next != state {
            stats.holding[state] += t - last_t;
            last_t = t;
            stats.record_jump(state, next);
            state = next;
        }
    }
    if state != end {
        return Err(PathError::SamplerExhausted { start, end, delta });
    }
    stats.holding[state] += delta - last_t;
    Ok(stats)
}

/// Complete-data log-likelihood `sum_{l != m} N_lm log q_lm - q_lm R_l`.
pub fn path_log_likelihood(q: &GeneratorMatrix, stats: &PathStats) -> Result<f64, PathError> {
    if stats.dim != q.dim() {
        return Err(PathError::DimensionMismatch { expected: q.dim(), got: stats.dim });
    }
    let k = q.dim();
    let mut ll = 0.0;
    for l in 0..k {
        for m in 0..k {
            if l == m {
                continue;
            }
            let rate = q.rate(l, m);
            let n = stats.jumps(l, m);
            if n > 0 {
                if rate <= 0.0 {
                    return Err(PathError::ZeroRateWithJump { from: l, to: m });
                }
                ll += n as f64 * rate.ln();
            }
            ll -= rate * stats.holding[l];
        }
    }
    Ok(ll)
}
