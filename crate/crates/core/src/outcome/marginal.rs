//! Closed-form conjugate marginal likelihoods.
//!
//! Each `marginal_loglik_*` returns `log ∫ L_subject dH` where `H` is the
//! prior updated by `others`. They are computed as evidence of the subject's
//! statistics under the updated prior rather than as a difference of joint
//! evidences, which keeps them accurate when `others` is large.

use statrs::function::gamma::ln_gamma;

use super::{CellStats, Family, ModelSpec, OutcomeError, OutcomeSuffStats, PriorSpec, ThetaPrior};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log ∫ θ^s e^{-nθ} Gamma(θ; a, b) dθ`.
fn gamma_poisson_evidence(shape: f64, rate: f64, sum: f64, count: f64) -> f64 {
    if sum == 0.0 && count == 0.0 {
        return 0.0;
    }
    shape * rate.ln() - ln_gamma(shape) + ln_gamma(shape + sum) - (shape + sum) * (rate + count).ln()
}

/// Log evidence of the cell's outcomes under `N(mean, var)` on the cell
/// mean and known observation sd `sigma`.
fn normal_evidence(mean: f64, var: f64, sigma: f64, c: &CellStats) -> f64 {
    if c.count == 0.0 {
        return 0.0;
    }
    let s2 = sigma * sigma;
    let prec = 1.0 / var + c.count / s2;
    let post_mean = (mean / var + c.sum / s2) / prec;
    -0.5 * c.count * (LN_2PI + s2.ln()) - 0.5 * (var * prec).ln() - 0.5 * c.sum_sq / s2 - 0.5 * mean * mean / var
        + 0.5 * prec * post_mean * post_mean
}

fn check_dims(others: &OutcomeSuffStats, subject: &OutcomeSuffStats) -> Result<(), OutcomeError> {
    if others.num_states != subject.num_states || others.num_levels != subject.num_levels {
        return Err(OutcomeError::MisalignedInputs("statistics dimensions differ".into()));
    }
    Ok(())
}

/// Outcome block: product over (state, level) cells.
pub fn marginal_loglik_theta(
    others: &OutcomeSuffStats,
    subject: &OutcomeSuffStats,
    spec: &ModelSpec,
) -> Result<f64, OutcomeError> {
    check_dims(others, subject)?;
    let mut total = 0.0;
    for k in 0..subject.num_states {
        for level in 0..subject.num_levels {
            let c = subject.cell(k, level);
            if c.count == 0.0 {
                continue;
            }
            let o = others.cell(k, level);
            total += match (&spec.prior.theta, spec.family) {
                (ThetaPrior::Gamma { shape, rate }, Family::Poisson) => {
                    gamma_poisson_evidence(shape[k] + o.sum, rate[k] + o.count, c.sum, c.count) - c.log_fact
                }
                (ThetaPrior::Normal { mean, sd }, Family::Gaussian { sigma }) => {
                    let s2 = sigma * sigma;
                    let prec = 1.0 / (sd[k] * sd[k]) + o.count / s2;
                    let m = (mean[k] / (sd[k] * sd[k]) + o.sum / s2) / prec;
                    normal_evidence(m, 1.0 / prec, sigma, c)
                }
                _ => return Err(OutcomeError::FamilyMismatch),
            };
        }
    }
    Ok(total)
}

/// Initial-state block: Dirichlet–multinomial over first-visit counts.
pub fn marginal_loglik_pi(
    others: &OutcomeSuffStats,
    subject: &OutcomeSuffStats,
    prior: &PriorSpec,
) -> Result<f64, OutcomeError> {
    check_dims(others, subject)?;
    let n: f64 = subject.first_visit.iter().sum();
    if n == 0.0 {
        return Ok(0.0);
    }
    let mut alpha_total = 0.0;
    let mut total = 0.0;
    for k in 0..subject.num_states {
        let a = prior.pi_concentration[k] + others.first_visit[k];
        alpha_total += a;
        let c = subject.first_visit[k];
        if c > 0.0 {
            total += ln_gamma(a + c) - ln_gamma(a);
        }
    }
    Ok(total + ln_gamma(alpha_total) - ln_gamma(alpha_total + n))
}

/// Generator block: one Gamma integral per off-diagonal channel.
pub fn marginal_loglik_q(
    others: &OutcomeSuffStats,
    subject: &OutcomeSuffStats,
    prior: &PriorSpec,
) -> Result<f64, OutcomeError> {
    check_dims(others, subject)?;
    let k = subject.num_states;
    let mut total = 0.0;
    for l in 0..k {
        let r = subject.holding[l];
        let rate = prior.q_rate[l] + others.holding[l];
        for m in 0..k {
            if l == m {
                continue;
            }
            let n = subject.jumps(l, m);
            if n == 0.0 && r == 0.0 {
                continue;
            }
            let shape = prior.q_shape[l][m] + others.jumps(l, m);
            total += gamma_poisson_evidence(shape, rate, n, r);
        }
    }
    Ok(total)
}

/// Sum of the outcome, initial-state and generator blocks.
pub fn subject_marginal_loglik(
    others: &OutcomeSuffStats,
    subject: &OutcomeSuffStats,
    spec: &ModelSpec,
) -> Result<f64, OutcomeError> {
    Ok(marginal_loglik_theta(others, subject, spec)?
        + marginal_loglik_pi(others, subject, &spec.prior)?
        + marginal_loglik_q(others, subject, &spec.prior)?)
}

/// Joint log marginal likelihood of a whole cluster's statistics under the
/// base prior. `q_only` restricts it to the generator block.
pub fn cluster_log_marginal(stats: &OutcomeSuffStats, spec: &ModelSpec, q_only: bool) -> Result<f64, OutcomeError> {
    let empty = OutcomeSuffStats::zeros(stats.num_states, stats.num_levels);
    if q_only {
        marginal_loglik_q(&empty, stats, &spec.prior)
    } else {
        subject_marginal_loglik(&empty, stats, spec)
    }
}
