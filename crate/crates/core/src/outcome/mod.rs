//! Exponential-family observation models, conjugate priors, closed-form
//! cluster marginals and posterior draws.

mod marginal;
mod suffstats;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ctmc::{CtmcError, GeneratorMatrix, InitialDistribution};

pub use marginal::{
    cluster_log_marginal, marginal_loglik_pi, marginal_loglik_q, marginal_loglik_theta,
    subject_marginal_loglik,
};
pub use suffstats::{accumulate_suffstats, CellStats, OutcomeSuffStats};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutcomeError {
    #[error("Poisson outcome must be a nonnegative integer, got {0}")]
    NegativeCount(f64),
    #[error("cell (state {state}, level {level}) out of range")]
    CellOutOfRange { state: usize, level: usize },
    #[error("misaligned inputs: {0}")]
    MisalignedInputs(String),
    #[error("prior family does not match outcome family")]
    FamilyMismatch,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Counts with log link; cells hold Poisson means.
    Poisson,
    /// Identity link with known residual standard deviation.
    Gaussian { sigma: f64 },
}

/// Per-state, per-level mean parameters of the outcome distribution.
///
/// Cells are indexed `state * num_levels + level` and hold the Poisson rate
/// or the Gaussian mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub family: Family,
    pub num_states: usize,
    pub num_levels: usize,
    pub cells: Vec<f64>,
}

impl OutcomeModel {
    pub fn new(family: Family, num_states: usize, num_levels: usize, cells: Vec<f64>) -> Result<Self, OutcomeError> {
        if cells.len() != num_states * num_levels {
            return Err(OutcomeError::InvalidModel(format!(
                "{} cells for {num_states} states x {num_levels} levels",
                cells.len()
            )));
        }
        match family {
            Family::Poisson => {
                if cells.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
                    return Err(OutcomeError::InvalidModel("Poisson rates must be positive".into()));
                }
            }
            Family::Gaussian { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(OutcomeError::InvalidModel("sigma must be positive".into()));
                }
                if cells.iter().any(|c| !c.is_finite()) {
                    return Err(OutcomeError::InvalidModel("non-finite mean".into()));
                }
            }
        }
        Ok(Self { family, num_states, num_levels, cells })
    }

    pub fn cell(&self, state: usize, level: usize) -> f64 {
        self.cells[state * self.num_levels + level]
    }

    /// Coefficient matrix `B` (rows: intercept then level contrasts; columns:
    /// states) on the link scale, with level 0 as the baseline.
    pub fn coefficients(&self) -> Vec<Vec<f64>> {
        let link = |v: f64| match self.family {
            Family::Poisson => v.ln(),
            Family::Gaussian { .. } => v,
        };
        let mut rows = vec![(0..self.num_states).map(|k| link(self.cell(k, 0))).collect::<Vec<_>>()];
        for level in 1..self.num_levels {
            rows.push(
                (0..self.num_states)
                    .map(|k| link(self.cell(k, level)) - link(self.cell(k, 0)))
                    .collect(),
            );
        }
        rows
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for &old in perm {
            for level in 0..self.num_levels {
                cells.push(self.cell(old, level));
            }
        }
        Self { cells, ..self.clone() }
    }
}

/// Exact log density of one outcome in cell `(state, level)`.
pub fn outcome_log_density(model: &OutcomeModel, o: f64, state: usize, level: usize) -> Result<f64, OutcomeError> {
    if state >= model.num_states || level >= model.num_levels {
        return Err(OutcomeError::CellOutOfRange { state, level });
    }
    let mean = model.cell(state, level);
    Ok(match model.family {
        Family::Poisson => {
            if o < 0.0 || o.fract() != 0.0 {
                return Err(OutcomeError::NegativeCount(o));
            }
            o * mean.ln() - mean - ln_gamma(o + 1.0)
        }
        Family::Gaussian { sigma } => {
            let z = (o - mean) / sigma;
            -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
        }
    })
}

/// Conjugate prior on the outcome cells, one entry per latent state and
/// shared across factor levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaPrior {
    Gamma { shape: Vec<f64>, rate: Vec<f64> },
    Normal { mean: Vec<f64>, sd: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub theta: ThetaPrior,
    /// Dirichlet concentrations on the initial distribution.
    pub pi_concentration: Vec<f64>,
    /// Gamma shapes `a_lm` of the off-diagonal rates (diagonal ignored).
    pub q_shape: Vec<Vec<f64>>,
    /// Gamma rates `b_l`, one per source state.
    pub q_rate: Vec<f64>,
    pub dp_alpha: f64,
}

impl PriorSpec {
    /// Weakly informative defaults: Dirichlet(1,...,1), Gamma(1,1) on rates
    /// and Poisson means, Normal(0, 10^2) on Gaussian means, `alpha = 1`.
    pub fn default_for(family: Family, num_states: usize) -> Self {
        let k = num_states;
        let theta = match family {
            Family::Poisson => ThetaPrior::Gamma { shape: vec![1.0; k], rate: vec![1.0; k] },
            Family::Gaussian { .. } => ThetaPrior::Normal { mean: vec![0.0; k], sd: vec![10.0; k] },
        };
        Self {
            theta,
            pi_concentration: vec![1.0; k],
            q_shape: vec![vec![1.0; k]; k],
            q_rate: vec![1.0; k],
            dp_alpha: 1.0,
        }
    }

    pub fn with_q_gamma(mut self, shape: f64, rate: f64) -> Self {
        let k = self.q_rate.len();
        self.q_shape = vec![vec![shape; k]; k];
        self.q_rate = vec![rate; k];
        self
    }

    pub fn num_states(&self) -> usize {
        self.pi_concentration.len()
    }

    pub fn validate(&self, family: Family) -> Result<(), OutcomeError> {
        let k = self.num_states();
        let positive = |v: &[f64], what: &str| -> Result<(), OutcomeError> {
            if v.len() != k {
                return Err(OutcomeError::InvalidPrior(format!("{what} has length {}, expected {k}", v.len())));
            }
            if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(OutcomeError::InvalidPrior(format!("{what} must be positive")));
            }
            Ok(())
        };
        if k < 2 {
            return Err(OutcomeError::InvalidPrior("need at least 2 states".into()));
        }
        positive(&self.pi_concentration, "pi_concentration")?;
        positive(&self.q_rate, "q_rate")?;
        if self.q_shape.len() != k {
            return Err(OutcomeError::InvalidPrior("q_shape must be K x K".into()));
        }
        for (l, row) in self.q_shape.iter().enumerate() {
            if row.len() != k {
                return Err(OutcomeError::InvalidPrior("q_shape must be K x K".into()));
            }
            if row.iter().enumerate().any(|(m, a)| m != l && (!(*a > 0.0) || !a.is_finite())) {
                return Err(OutcomeError::InvalidPrior("q_shape must be positive".into()));
            }
        }
        if !(self.dp_alpha > 0.0) || !self.dp_alpha.is_finite() {
            return Err(OutcomeError::InvalidPrior("dp_alpha must be positive".into()));
        }
        match (&self.theta, family) {
            (ThetaPrior::Gamma { shape, rate }, Family::Poisson) => {
                positive(shape, "theta shape")?;
                positive(rate, "theta rate")?;
            }
            (ThetaPrior::Normal { mean, sd }, Family::Gaussian { .. }) => {
                if mean.len() != k || mean.iter().any(|m| !m.is_finite()) {
                    return Err(OutcomeError::InvalidPrior("theta mean must have K finite entries".into()));
                }
                positive(sd, "theta sd")?;
            }
            _ => return Err(OutcomeError::FamilyMismatch),
        }
        Ok(())
    }
}

/// Family, dimensions and prior of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub num_states: usize,
    pub num_levels: usize,
    pub prior: PriorSpec,
}

impl ModelSpec {
    pub fn new(family: Family, num_states: usize, num_levels: usize, prior: PriorSpec) -> Result<Self, OutcomeError> {
        if prior.num_states() != num_states {
            return Err(OutcomeError::InvalidPrior(format!(
                "prior has {} states, model has {num_states}",
                prior.num_states()
            )));
        }
        if num_levels == 0 {
            return Err(OutcomeError::InvalidModel("need at least one level".into()));
        }
        if let Family::Gaussian { sigma } = family {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(OutcomeError::InvalidModel("sigma must be positive".into()));
            }
        }
        prior.validate(family)?;
        Ok(Self { family, num_states, num_levels, prior })
    }

    pub fn num_cells(&self) -> usize {
        self.num_states * self.num_levels
    }
}

/// One mixture component's `(pi, Q, theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub pi: InitialDistribution,
    pub q: GeneratorMatrix,
    pub outcome: OutcomeModel,
}

impl ClusterParams {
    /// Permutation sorting states by their baseline-level mean, ascending.
    pub fn ascending_state_order(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.outcome.num_states).collect();
        perm.sort_by(|&a, &b| self.outcome.cell(a, 0).total_cmp(&self.outcome.cell(b, 0)));
        perm
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { pi: self.pi.permuted(perm), q: self.q.permuted(perm), outcome: self.outcome.permuted(perm) }
    }
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng)
}

/// `q_lm ~ Gamma(a_lm + sum N_lm, b_l + sum R_l)`.
pub fn sample_generator<R: Rng + ?Sized>(
    stats: &OutcomeSuffStats,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<GeneratorMatrix, OutcomeError> {
    let k = prior.num_states();
    let mut rates = vec![vec![0.0; k]; k];
    for l in 0..k {
        let rate = prior.q_rate[l] + stats.holding[l];
        for m in 0..k {
            if l != m {
                let shape = prior.q_shape[l][m] + stats.jumps[l * k + m];
                rates[l][m] = gamma_draw(shape, rate, rng);
            }
        }
    }
    Ok(GeneratorMatrix::from_rows(&rates)?)
}

/// `pi ~ Dirichlet(alpha + first-visit counts)`.
pub fn sample_initial<R: Rng + ?Sized>(
    stats: &OutcomeSuffStats,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<InitialDistribution, OutcomeError> {
    let draws: Vec<f64> = prior
        .pi_concentration
        .iter()
        .zip(&stats.first_visit)
        .map(|(a, c)| gamma_draw(a + c, 1.0, rng))
        .collect();
    if draws.iter().sum::<f64>() > 0.0 {
        Ok(InitialDistribution::normalized(draws)?)
    } else {
        // All shapes tiny enough to underflow; fall back to the prior mean.
        Ok(InitialDistribution::normalized(prior.pi_concentration.clone())?)
    }
}

/// Outcome cells from their conjugate posteriors.
pub fn sample_outcome<R: Rng + ?Sized>(
    stats: &OutcomeSuffStats,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<OutcomeModel, OutcomeError> {
    let mut cells = Vec::with_capacity(spec.num_cells());
    for k in 0..spec.num_states {
        for level in 0..spec.num_levels {
            let c = stats.cell(k, level);
            let v = match (&spec.prior.theta, spec.family) {
                (ThetaPrior::Gamma { shape, rate }, Family::Poisson) => {
                    gamma_draw(shape[k] + c.sum, rate[k] + c.count, rng).max(f64::MIN_POSITIVE)
                }
                (ThetaPrior::Normal { mean, sd }, Family::Gaussian { sigma }) => {
                    let prec = 1.0 / (sd[k] * sd[k]) + c.count / (sigma * sigma);
                    let m = (mean[k] / (sd[k] * sd[k]) + c.sum / (sigma * sigma)) / prec;
                    Normal::new(m, prec.sqrt().recip()).expect("finite normal").sample(rng)
                }
                _ => return Err(OutcomeError::FamilyMismatch),
            };
            cells.push(v);
        }
    }
    OutcomeModel::new(spec.family, spec.num_states, spec.num_levels, cells)
}

/// Draws `(pi, Q, theta)` from the conjugate posterior given `stats`.
pub fn sample_cluster_params<R: Rng + ?Sized>(
    stats: &OutcomeSuffStats,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<ClusterParams, OutcomeError> {
    let q = sample_generator(stats, &spec.prior, rng)?;
    let pi = sample_initial(stats, &spec.prior, rng)?;
    let outcome = sample_outcome(stats, spec, rng)?;
    Ok(ClusterParams { pi, q, outcome })
}
