//! Generator matrices of the latent continuous-time Markov chain, their
//! transition probabilities and spectra.

mod expm;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expm::expm;

/// Row-sum tolerance enforced on generators after diagonal repair.
pub const GENERATOR_ROW_TOL: f64 = 1e-12;
/// Row-sum tolerance on transition matrices.
pub const STOCHASTIC_ROW_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtmcError {
    #[error("generator must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("negative rate {value} on channel {from}->{to} (0-based)")]
    NegativeRate { from: usize, to: usize, value: f64 },
    #[error("generator needs at least 2 states, got {0}")]
    DimensionTooSmall(usize),
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Infinitesimal generator `Q`: nonnegative off-diagonal rates, rows summing
/// to zero. The diagonal is always recomputed from the off-diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMatrix {
    rates: DMatrix<f64>,
}

impl GeneratorMatrix {
    /// Validates `raw` and repairs its diagonal.
    pub fn new(raw: DMatrix<f64>) -> Result<Self, CtmcError> {
        let (rows, cols) = raw.shape();
        if rows != cols {
            return Err(CtmcError::NonSquare { rows, cols });
        }
        if rows < 2 {
            return Err(CtmcError::DimensionTooSmall(rows));
        }
        let mut rates = raw;
        for l in 0..rows {
            let mut exit = 0.0;
            for m in 0..cols {
                if l == m {
                    continue;
                }
                let v = rates[(l, m)];
                if !v.is_finite() {
                    return Err(CtmcError::NonFiniteInput("generator rate"));
                }
                if v < 0.0 {
                    return Err(CtmcError::NegativeRate { from: l, to: m, value: v });
                }
                exit += v;
            }
            rates[(l, l)] = -exit;
        }
        Ok(Self { rates })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CtmcError> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
            return Err(CtmcError::NonSquare { rows: k, cols });
        }
        Self::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }

    /// Builds a generator from `rate(l, m)` evaluated off the diagonal.
    pub fn from_off_diagonal(k: usize, rate: impl Fn(usize, usize) -> f64) -> Result<Self, CtmcError> {
        Self::new(DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { rate(i, j) }))
    }

    pub fn zeros(k: usize) -> Result<Self, CtmcError> {
        Self::new(DMatrix::zeros(k, k))
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total exit rate `-q_ll` of state `l`.
    pub fn exit_rate(&self, l: usize) -> f64 {
        -self.rates[(l, l)]
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.dim()).map(|l| self.exit_rate(l)).fold(0.0, f64::max)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.rates.row(i).iter().copied().collect()).collect()
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.dim();
        Self { rates: DMatrix::from_fn(k, k, |i, j| self.rates[(perm[i], perm[j])]) }
    }

    /// States reachable from `from` along positive-rate edges (including itself).
    pub fn reachable(&self, from: usize) -> Vec<bool> {
        let k = self.dim();
        let mut seen = vec![false; k];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(l) = stack.pop() {
            for m in 0..k {
                if m != l && !seen[m] && self.rates[(l, m)] > 0.0 {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }
}

/// Row-stochastic matrix of transition probabilities over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    probs: DMatrix<f64>,
}

impl StochasticMatrix {
    pub fn identity(k: usize) -> Self {
        Self { probs: DMatrix::identity(k, k) }
    }

    pub fn dim(&self) -> usize {
        self.probs.nrows()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.probs[(from, to)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.probs.row(i).into_iter().copied().collect::<Vec<_>>().into_iter()
    }
}

/// Initial-state distribution `pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    probs: Vec<f64>,
}

impl InitialDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, CtmcError> {
        if probs.is_empty() {
            return Err(CtmcError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CtmcError::InvalidDistribution(format!("{probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CtmcError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights; used for Dirichlet draws that carry
    /// rounding error.
    pub fn normalized(weights: Vec<f64>) -> Result<Self, CtmcError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(CtmcError::InvalidDistribution(format!("{weights:?}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { probs: perm.iter().map(|&p| self.probs[p]).collect() }
    }
}

pub fn validate_generator(raw: DMatrix<f64>) -> Result<GeneratorMatrix, CtmcError> {
    GeneratorMatrix::new(raw)
}

/// `expm(delta * Q)`.
pub fn transition_matrix(q: &GeneratorMatrix, delta: f64) -> Result<StochasticMatrix, CtmcError> {
    if !delta.is_finite() {
        return Err(CtmcError::NonFiniteInput("delta"));
    }
    if delta < 0.0 {
        return Err(CtmcError::NonFiniteInput("negative delta"));
    }
    if q.rates.iter().any(|v| !v.is_finite()) {
        return Err(CtmcError::NonFiniteInput("generator"));
    }
    let k = q.dim();
    if delta == 0.0 {
        return Ok(StochasticMatrix::identity(k));
    }
    let mut probs = expm(&(&q.rates * delta));
    // Clip rounding noise; Padé output of a generator is entrywise
    // nonnegative up to a few ulps.
    for v in probs.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        } else if *v > 1.0 {
            *v = 1.0;
        }
    }
    Ok(StochasticMatrix { probs })
}

/// Eigenvalues sorted by descending real part, then descending imaginary part.
pub fn generator_eigenvalues(q: &GeneratorMatrix) -> Result<Vec<Complex<f64>>, CtmcError> {
    let schur = nalgebra::linalg::Schur::try_new(q.rates.clone(), f64::EPSILON, 10_000)
        .ok_or(CtmcError::EigenFailure)?;
    let mut eig: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(eig)
}

/// Stationary distribution solving `pi Q = 0`, `sum(pi) = 1`.
pub fn stationary_distribution(q: &GeneratorMatrix) -> Result<Vec<f64>, CtmcError> {
    let k = q.dim();
    // Replace one balance equation by the normalization constraint.
    let mut a = q.rates.transpose();
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(k);
    rhs[k - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(CtmcError::EigenFailure)?;
    Ok(sol.iter().copied().collect())
}
