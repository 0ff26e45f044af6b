//! Per-subject latent updates: smoothing, state draws and path simulation.

use rand::Rng;

use crate::ctmc::{GeneratorMatrix, InitialDistribution};
use crate::data::SubjectRecord;
use crate::hmm::{forward_backward_cached, sample_latent_states, sample_state_pairs, TransitionCache};
use crate::outcome::{OutcomeModel, OutcomeSuffStats};
use crate::path::{simulate_conditioned_path, PathError, PathStats};

use super::state::SubjectLatent;
use super::SamplerError;

/// Smooths one subject under its cluster's parameters, draws latent states
/// from the state marginals, endpoint pairs from the pair marginals and a
/// conditioned path for every interval.
pub fn draw_subject_latent<R: Rng + ?Sized>(
    subject: &SubjectRecord,
    pi: &InitialDistribution,
    cache: &TransitionCache,
    outcome: &OutcomeModel,
    rng: &mut R,
) -> Result<SubjectLatent, SamplerError> {
    let sm = forward_backward_cached(subject, pi, cache, outcome)?;
    let states = sample_latent_states(&sm, rng);
    let mut endpoints = Vec::with_capacity(subject.len().saturating_sub(1));
    let mut paths = Vec::with_capacity(subject.len().saturating_sub(1));
    for (t, delta) in subject.deltas().enumerate() {
        let (a, b) = sample_state_pairs(&sm, t, rng)?;
        endpoints.push((a, b));
        paths.push(simulate_conditioned_path(cache.generator(), delta, a, b, rng)?);
    }
    Ok(SubjectLatent { states, endpoints, paths })
}

/// Fresh conditioned paths for every interval of one subject under `q`,
/// keeping the stored endpoint pairs. An interval whose endpoints are
/// unreachable under `q` keeps its current path.
pub fn resimulate_subject_paths<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    subject: &SubjectRecord,
    latent: &SubjectLatent,
    rng: &mut R,
) -> Result<Vec<PathStats>, SamplerError> {
    subject
        .deltas()
        .zip(&latent.endpoints)
        .zip(&latent.paths)
        .map(|((delta, &(a, b)), old)| match simulate_conditioned_path(q, delta, a, b, rng) {
            Ok(p) => Ok(p),
            Err(PathError::ImpossibleEndpoint { .. }) => Ok(old.clone()),
            Err(e) => Err(e.into()),
        })
        .collect()
}

/// `stats` with its jump and occupancy totals replaced by those of `paths`.
pub fn with_path_stats(stats: &OutcomeSuffStats, paths: &[PathStats]) -> OutcomeSuffStats {
    let k = stats.num_states;
    let mut out = stats.clone();
    out.jumps.iter_mut().for_each(|v| *v = 0.0);
    out.holding.iter_mut().for_each(|v| *v = 0.0);
    for p in paths {
        for l in 0..k {
            out.holding[l] += p.holding(l);
            for m in 0..k {
                out.jumps[l * k + m] += f64::from(p.jumps(l, m));
            }
        }
    }
    out
}
