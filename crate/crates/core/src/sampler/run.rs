//! Initialization, parameter refresh and the iteration driver.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{GeneratorMatrix, InitialDistribution};
use crate::data::{DataError, Dataset};
use crate::hmm::TransitionCache;
use crate::outcome::{
    accumulate_suffstats, sample_cluster_params, sample_generator, sample_initial, sample_outcome, ClusterParams,
    Family, ModelSpec, OutcomeModel, OutcomeSuffStats,
};
use crate::rng::{Purpose, RngStreams};

use super::gibbs::{gibbs_label_sweep, Scorer};
use super::paths::{draw_subject_latent, resimulate_subject_paths, with_path_stats};
use super::split_merge::{split_merge_step, MoveKind, SplitMergeSettings};
use super::state::{canonical_labels, InitMethod, PosteriorSample, SamplerConfig, SamplerState, SharedParams};
use super::SamplerError;

const CLUSTER_STREAM_BASE: u64 = 1 << 40;
const SHARED_STREAM: u64 = 1 << 41;

fn check_data(data: &Dataset, spec: &ModelSpec) -> Result<(), SamplerError> {
    if data.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    for s in &data.subjects {
        s.validate()?;
    }
    if data.num_levels() > spec.num_levels {
        return Err(SamplerError::DataModelMismatch(format!(
            "data has {} covariate levels, model has {}",
            data.num_levels(),
            spec.num_levels
        )));
    }
    if spec.family == Family::Poisson {
        for s in &data.subjects {
            if let Some(o) = s.outcomes.iter().find(|o| **o < 0.0 || o.fract() != 0.0) {
                return Err(SamplerError::DataModelMismatch(format!(
                    "subject {}: outcome {o} is not a count",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

/// Outcome cells from the means of `K` equal-count groups of the pooled
/// outcomes, strictly increasing across states.
fn quantile_outcome(data: &Dataset, spec: &ModelSpec) -> Result<OutcomeModel, SamplerError> {
    let mut pooled: Vec<f64> = data.subjects.iter().flat_map(|s| s.outcomes.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let k = spec.num_states;
    let n = pooled.len();
    let mut means = Vec::with_capacity(k);
    for g in 0..k {
        let lo = (g * n / k).min(n - 1);
        let hi = ((g + 1) * n / k).clamp(lo + 1, n);
        let slice = &pooled[lo..hi];
        means.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    let spread = (pooled[n - 1] - pooled[0]).abs().max(1.0) * 1e-3;
    for g in 1..k {
        if means[g] <= means[g - 1] {
            means[g] = means[g - 1] + spread;
        }
    }
    if spec.family == Family::Poisson {
        let floor = 0.05;
        for (g, m) in means.iter_mut().enumerate() {
            *m = m.max(floor * (g + 1) as f64);
        }
        for g in 1..k {
            if means[g] <= means[g - 1] {
                means[g] = means[g - 1] + floor;
            }
        }
    }
    let cells = means.iter().flat_map(|&m| std::iter::repeat_n(m, spec.num_levels)).collect();
    Ok(OutcomeModel::new(spec.family, k, spec.num_levels, cells)?)
}

fn prior_mean_generator(spec: &ModelSpec) -> Result<GeneratorMatrix, SamplerError> {
    let p = &spec.prior;
    Ok(GeneratorMatrix::from_off_diagonal(spec.num_states, |l, m| p.q_shape[l][m] / p.q_rate[l])?)
}

/// Random initial labels, initial parameters and one latent pass.
pub fn init_state(data: &Dataset, config: &SamplerConfig) -> Result<SamplerState, SamplerError> {
    config.validate()?;
    let spec = &config.model;
    check_data(data, spec)?;
    let streams = RngStreams::new(config.seed);
    let mut rng = streams.stream(0, Purpose::Init, 0);
    let raw: Vec<usize> =
        (0..data.len()).map(|_| rand::Rng::random_range(&mut rng, 0..config.initial_clusters)).collect();
    let (labels, _) = canonical_labels(&raw);
    let m = labels.iter().copied().max().map_or(0, |x| x + 1);

    let zero = OutcomeSuffStats::zeros(spec.num_states, spec.num_levels);
    let (shared, cluster_params) = match config.init {
        InitMethod::Quantile => {
            let outcome = quantile_outcome(data, spec)?;
            let pi = InitialDistribution::uniform(spec.num_states);
            let q = prior_mean_generator(spec)?;
            let params = ClusterParams { pi: pi.clone(), q, outcome: outcome.clone() };
            let shared = config.q_only().then(|| SharedParams { pi, outcome });
            (shared, vec![params; m])
        }
        InitMethod::Prior => {
            let shared = if config.q_only() {
                Some(SharedParams {
                    pi: sample_initial(&zero, &spec.prior, &mut rng)?,
                    outcome: sample_outcome(&zero, spec, &mut rng)?,
                })
            } else {
                None
            };
            let mut params = Vec::with_capacity(m);
            for _ in 0..m {
                let mut p = sample_cluster_params(&zero, spec, &mut rng)?;
                if let Some(s) = &shared {
                    p.pi = s.pi.clone();
                    p.outcome = s.outcome.clone();
                }
                params.push(p);
            }
            (shared, params)
        }
    };

    let mut state = SamplerState {
        iteration: 0,
        labels,
        latent: Vec::new(),
        cluster_params,
        shared,
        subject_stats: Vec::new(),
    };
    latent_step(&mut state, data, spec, &streams, 0)?;
    if config.order_states {
        order_states(&mut state, config.q_only());
    }
    Ok(state)
}

/// Smoothing, latent-state draws and path simulation for every subject under
/// its current cluster.
fn latent_step(
    state: &mut SamplerState,
    data: &Dataset,
    spec: &ModelSpec,
    streams: &RngStreams,
    iteration: u64,
) -> Result<(), SamplerError> {
    let caches: Vec<TransitionCache> = state.cluster_params.iter().map(|p| TransitionCache::new(p.q.clone())).collect();
    let params = &state.cluster_params;
    let labels = &state.labels;
    let results: Vec<_> = data
        .subjects
        .par_iter()
        .enumerate()
        .map(|(n, subject)| {
            let mut rng = streams.stream(iteration, Purpose::LatentStates, n as u64);
            let c = labels[n];
            let latent = draw_subject_latent(subject, &params[c].pi, &caches[c], &params[c].outcome, &mut rng)?;
            let stats = OutcomeSuffStats::from_subject(
                spec.family,
                spec.num_states,
                spec.num_levels,
                subject,
                &latent.states,
                &latent.paths,
            )?;
            Ok::<_, SamplerError>((latent, stats))
        })
        .collect::<Result<_, _>>()?;
    let (latent, stats) = results.into_iter().unzip();
    state.latent = latent;
    state.subject_stats = stats;
    Ok(())
}

/// Per cluster: fresh member paths under the cluster's current rates, then
/// conjugate draws of its parameters. In the Q-only variant `pi` and the
/// outcome cells are drawn once from all subjects.
pub fn refresh_cluster_params(
    state: &mut SamplerState,
    data: &Dataset,
    spec: &ModelSpec,
    streams: &RngStreams,
    iteration: u64,
) -> Result<(), SamplerError> {
    let params = &state.cluster_params;
    let labels = &state.labels;
    let latent = &state.latent;
    let subject_stats = &state.subject_stats;
    let updated: Vec<_> = data
        .subjects
        .par_iter()
        .enumerate()
        .map(|(n, subject)| {
            let mut rng = streams.stream(iteration, Purpose::Refresh, n as u64);
            let paths = resimulate_subject_paths(&params[labels[n]].q, subject, &latent[n], &mut rng)?;
            let stats = with_path_stats(&subject_stats[n], &paths);
            Ok::<_, SamplerError>((paths, stats))
        })
        .collect::<Result<_, _>>()?;
    for (n, (paths, stats)) in updated.into_iter().enumerate() {
        state.latent[n].paths = paths;
        state.subject_stats[n] = stats;
    }

    let cluster_stats = state.cluster_stats();
    for (c, stats) in cluster_stats.iter().enumerate() {
        let mut rng = streams.stream(iteration, Purpose::Refresh, CLUSTER_STREAM_BASE + c as u64);
        if state.shared.is_some() {
            state.cluster_params[c].q = sample_generator(stats, &spec.prior, &mut rng)?;
        } else {
            state.cluster_params[c] = sample_cluster_params(stats, spec, &mut rng)?;
        }
    }
    if state.shared.is_some() {
        let total = accumulate_suffstats(spec.num_states, spec.num_levels, &state.subject_stats);
        let mut rng = streams.stream(iteration, Purpose::Refresh, SHARED_STREAM);
        let shared = SharedParams {
            pi: sample_initial(&total, &spec.prior, &mut rng)?,
            outcome: sample_outcome(&total, spec, &mut rng)?,
        };
        for p in state.cluster_params.iter_mut() {
            p.pi = shared.pi.clone();
            p.outcome = shared.outcome.clone();
        }
        state.shared = Some(shared);
    }
    Ok(())
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

fn permute_subject(state: &mut SamplerState, n: usize, perm: &[usize], inv: &[usize]) {
    let lat = &mut state.latent[n];
    for s in lat.states.iter_mut() {
        *s = inv[*s];
    }
    for (a, b) in lat.endpoints.iter_mut() {
        *a = inv[*a];
        *b = inv[*b];
    }
    for p in lat.paths.iter_mut() {
        *p = p.permuted(perm);
    }
    state.subject_stats[n] = state.subject_stats[n].permuted(perm);
}

/// Relabels latent states so the baseline outcome means ascend, per
/// cluster (or globally in the Q-only variant).
fn order_states(state: &mut SamplerState, q_only: bool) {
    let identity = |p: &[usize]| p.iter().enumerate().all(|(i, &v)| i == v);
    if q_only {
        let Some(shared) = &state.shared else { return };
        let probe = ClusterParams {
            pi: shared.pi.clone(),
            q: state.cluster_params[0].q.clone(),
            outcome: shared.outcome.clone(),
        };
        let perm = probe.ascending_state_order();
        if identity(&perm) {
            return;
        }
        let inv = inverse(&perm);
        state.shared = Some(SharedParams { pi: shared.pi.permuted(&perm), outcome: shared.outcome.permuted(&perm) });
        for p in state.cluster_params.iter_mut() {
            *p = p.permuted(&perm);
        }
        for n in 0..state.labels.len() {
            permute_subject(state, n, &perm, &inv);
        }
        return;
    }
    for c in 0..state.num_clusters() {
        let perm = state.cluster_params[c].ascending_state_order();
        if identity(&perm) {
            continue;
        }
        let inv = inverse(&perm);
        state.cluster_params[c] = state.cluster_params[c].permuted(&perm);
        for n in 0..state.labels.len() {
            if state.labels[n] == c {
                permute_subject(state, n, &perm, &inv);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub latent: Duration,
    pub gibbs: Duration,
    pub split_merge: Duration,
    pub refresh: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveCounts {
    pub split_proposed: u64,
    pub split_accepted: u64,
    pub merge_proposed: u64,
    pub merge_accepted: u64,
}

/// Iteration driver over a fixed dataset.
pub struct Sampler<'a> {
    data: &'a Dataset,
    config: SamplerConfig,
    streams: RngStreams,
    state: SamplerState,
    pub timings: PhaseTimings,
    pub moves: MoveCounts,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, config: SamplerConfig) -> Result<Self, SamplerError> {
        let state = init_state(data, &config)?;
        Ok(Self::resume(data, config, state)?)
    }

    /// Continues from a saved state; the next iteration is `state.iteration + 1`.
    pub fn resume(data: &'a Dataset, config: SamplerConfig, state: SamplerState) -> Result<Self, SamplerError> {
        config.validate()?;
        check_data(data, &config.model)?;
        state.check()?;
        if state.labels.len() != data.len() {
            return Err(SamplerError::InvalidState(format!(
                "state has {} subjects, dataset has {}",
                state.labels.len(),
                data.len()
            )));
        }
        let streams = RngStreams::new(config.seed);
        Ok(Self { data, config, streams, state, timings: PhaseTimings::default(), moves: MoveCounts::default() })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn into_state(self) -> SamplerState {
        self.state
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.num_iterations
    }

    /// Runs one full iteration; returns the sample when it is retained.
    pub fn step(&mut self) -> Result<Option<PosteriorSample>, SamplerError> {
        let it = self.state.iteration + 1;
        let spec = &self.config.model;
        let q_only = self.config.q_only();
        let scorer = Scorer::new(spec, q_only);

        let t0 = Instant::now();
        latent_step(&mut self.state, self.data, spec, &self.streams, it)?;
        let t1 = Instant::now();
        for s in 0..self.config.gibbs_sweeps {
            let mut rng = self.streams.stream(it, Purpose::Gibbs, s as u64);
            gibbs_label_sweep(&mut self.state, scorer, &mut rng)?;
        }
        let t2 = Instant::now();
        if self.data.len() >= 2 {
            let settings = SplitMergeSettings {
                scans: self.config.restricted_scans,
                resimulate_paths: self.config.resimulate_paths,
            };
            for m in 0..self.config.split_merge_moves {
                let mut rng = self.streams.stream(it, Purpose::SplitMerge, m as u64);
                let (kind, accepted) = split_merge_step(
                    &mut self.state,
                    self.data,
                    &scorer,
                    settings,
                    &mut rng,
                    &self.streams,
                    it,
                    m as u64,
                )?;
                match kind {
                    MoveKind::Split => {
                        self.moves.split_proposed += 1;
                        self.moves.split_accepted += u64::from(accepted);
                    }
                    MoveKind::Merge => {
                        self.moves.merge_proposed += 1;
                        self.moves.merge_accepted += u64::from(accepted);
                    }
                }
            }
        }
        let t3 = Instant::now();
        refresh_cluster_params(&mut self.state, self.data, spec, &self.streams, it)?;
        if self.config.order_states {
            order_states(&mut self.state, q_only);
        }
        let t4 = Instant::now();
        self.timings.latent += t1 - t0;
        self.timings.gibbs += t2 - t1;
        self.timings.split_merge += t3 - t2;
        self.timings.refresh += t4 - t3;

        self.state.iteration = it;
        Ok(self.config.is_retained(it).then(|| PosteriorSample::from_state(&self.state)))
    }

    /// Runs to completion, handing each retained sample and each scheduled
    /// checkpoint state to the callbacks.
    pub fn run_with(
        &mut self,
        mut on_sample: impl FnMut(&PosteriorSample) -> Result<(), SamplerError>,
        mut on_checkpoint: impl FnMut(&SamplerState, &MoveCounts) -> Result<(), SamplerError>,
    ) -> Result<(), SamplerError> {
        while !self.is_done() {
            if let Some(sample) = self.step()? {
                on_sample(&sample)?;
            }
            let every = self.config.checkpoint_interval;
            if every > 0 && (self.state.iteration % every == 0 || self.is_done()) {
                on_checkpoint(&self.state, &self.moves)?;
            }
        }
        Ok(())
    }
}

/// Runs the sampler and collects every retained sample.
pub fn run_mcmc(data: &Dataset, config: SamplerConfig) -> Result<Vec<PosteriorSample>, SamplerError> {
    let mut sampler = Sampler::new(data, config)?;
    let mut out = Vec::new();
    sampler.run_with(
        |s| {
            out.push(s.clone());
            Ok(())
        },
        |_, _| Ok(()),
    )?;
    Ok(out)
}
