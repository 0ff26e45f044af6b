//! Restricted-Gibbs split-merge Metropolis–Hastings moves.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::ctmc::GeneratorMatrix;
use crate::data::Dataset;
use crate::outcome::{accumulate_suffstats, sample_generator, OutcomeSuffStats};
use crate::path::PathStats;
use crate::rng::{Purpose, RngStreams};

use super::gibbs::Scorer;
use super::paths::{resimulate_subject_paths, with_path_stats};
use super::state::SamplerState;
use super::SamplerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Split,
    Merge,
}

/// Launch configuration over the two anchor subjects and the other members
/// of their clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct LaunchState {
    pub d: usize,
    pub e: usize,
    /// Other members of the clusters of `d` and `e`, ascending.
    pub members: Vec<usize>,
    /// `true` when the member sits with `d`.
    pub with_d: Vec<bool>,
    pub stats_d: OutcomeSuffStats,
    pub stats_e: OutcomeSuffStats,
    pub size_d: usize,
    pub size_e: usize,
}

impl LaunchState {
    /// Random uniform assignment of `members` followed by nothing else.
    pub fn random<R: Rng + ?Sized>(
        subject_stats: &[OutcomeSuffStats],
        d: usize,
        e: usize,
        members: Vec<usize>,
        rng: &mut R,
    ) -> Self {
        let with_d: Vec<bool> = members.iter().map(|_| rng.random::<bool>()).collect();
        Self::from_assignment(subject_stats, d, e, members, with_d)
    }

    pub fn from_assignment(
        subject_stats: &[OutcomeSuffStats],
        d: usize,
        e: usize,
        members: Vec<usize>,
        with_d: Vec<bool>,
    ) -> Self {
        let mut stats_d = subject_stats[d].clone();
        let mut stats_e = subject_stats[e].clone();
        let (mut size_d, mut size_e) = (1, 1);
        for (&f, &side) in members.iter().zip(&with_d) {
            if side {
                stats_d += &subject_stats[f];
                size_d += 1;
            } else {
                stats_e += &subject_stats[f];
                size_e += 1;
            }
        }
        Self { d, e, members, with_d, stats_d, stats_e, size_d, size_e }
    }

    fn remove(&mut self, i: usize, s: &OutcomeSuffStats) {
        if self.with_d[i] {
            self.stats_d -= s;
            self.size_d -= 1;
        } else {
            self.stats_e -= s;
            self.size_e -= 1;
        }
    }

    fn insert(&mut self, i: usize, side: bool, s: &OutcomeSuffStats) {
        self.with_d[i] = side;
        if side {
            self.stats_d += s;
            self.size_d += 1;
        } else {
            self.stats_e += s;
            self.size_e += 1;
        }
    }

    /// Probability that member `i` (currently removed) joins `d`'s side.
    fn prob_d(&self, s: &OutcomeSuffStats, scorer: &Scorer) -> Result<f64, SamplerError> {
        let ld = (self.size_d as f64).ln() + scorer.marginal(&self.stats_d, s)?;
        let le = (self.size_e as f64).ln() + scorer.marginal(&self.stats_e, s)?;
        let m = ld.max(le);
        let (wd, we) = ((ld - m).exp(), (le - m).exp());
        Ok(wd / (wd + we))
    }

    /// One restricted Gibbs sweep; returns the log probability of the
    /// assignments it drew.
    pub fn scan<R: Rng + ?Sized>(
        &mut self,
        subject_stats: &[OutcomeSuffStats],
        scorer: &Scorer,
        rng: &mut R,
    ) -> Result<f64, SamplerError> {
        let mut log_q = 0.0;
        for i in 0..self.members.len() {
            let s = &subject_stats[self.members[i]];
            self.remove(i, s);
            let p = self.prob_d(s, scorer)?;
            let side = rng.random::<f64>() < p;
            log_q += if side { p.ln() } else { (1.0 - p).ln() };
            self.insert(i, side, s);
        }
        Ok(log_q)
    }

    /// Log probability that one restricted sweep from this launch lands on
    /// `target`; the launch ends at `target`.
    pub fn transition_log_prob(
        &mut self,
        subject_stats: &[OutcomeSuffStats],
        target: &[bool],
        scorer: &Scorer,
    ) -> Result<f64, SamplerError> {
        let mut log_q = 0.0;
        for i in 0..self.members.len() {
            let s = &subject_stats[self.members[i]];
            self.remove(i, s);
            let p = self.prob_d(s, scorer)?;
            log_q += if target[i] { p.ln() } else { (1.0 - p).ln() };
            self.insert(i, target[i], s);
        }
        Ok(log_q)
    }
}

/// Random launch followed by `scans` restricted sweeps.
pub fn build_launch_state<R: Rng + ?Sized>(
    subject_stats: &[OutcomeSuffStats],
    d: usize,
    e: usize,
    members: Vec<usize>,
    scans: usize,
    scorer: &Scorer,
    rng: &mut R,
) -> Result<LaunchState, SamplerError> {
    let mut launch = LaunchState::random(subject_stats, d, e, members, rng);
    for _ in 0..scans {
        launch.scan(subject_stats, scorer, rng)?;
    }
    Ok(launch)
}

/// Log prior ratio of splitting a cluster into parts of the given sizes.
pub fn split_log_prior_ratio(alpha: f64, size_d: usize, size_e: usize) -> f64 {
    alpha.ln() + ln_gamma(size_d as f64) + ln_gamma(size_e as f64) - ln_gamma((size_d + size_e) as f64)
}

/// Log prior ratio of merging clusters of the given sizes.
pub fn merge_log_prior_ratio(alpha: f64, size_d: usize, size_e: usize) -> f64 {
    -split_log_prior_ratio(alpha, size_d, size_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMergeSettings {
    pub scans: usize,
    pub resimulate_paths: bool,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub kind: MoveKind,
    pub d: usize,
    pub e: usize,
    /// Proposed labels; a split gives `d`'s side the label `num_clusters`.
    pub labels: Vec<usize>,
    /// `log q(C | C*) - log q(C* | C)`.
    pub log_proposal_ratio: f64,
    pub log_prior_ratio: f64,
    pub log_lik_ratio: f64,
    /// Re-simulated paths and statistics of affected subjects.
    pub updates: Vec<(usize, Vec<PathStats>, OutcomeSuffStats)>,
    /// Rate draws for proposed clusters: `(d side, e side)` for a split,
    /// `(merged, _)` for a merge.
    pub generators: Option<(GeneratorMatrix, Option<GeneratorMatrix>)>,
}

impl Proposal {
    pub fn log_acceptance(&self) -> f64 {
        self.log_proposal_ratio + self.log_prior_ratio + self.log_lik_ratio
    }
}

fn resimulate_group(
    state: &SamplerState,
    data: &Dataset,
    q: &GeneratorMatrix,
    group: &[usize],
    streams: &RngStreams,
    iteration: u64,
    stream_base: u64,
) -> Result<Vec<(usize, Vec<PathStats>, OutcomeSuffStats)>, SamplerError> {
    use rayon::prelude::*;
    group
        .par_iter()
        .map(|&f| {
            let mut rng = streams.stream(iteration, Purpose::SplitMerge, stream_base + f as u64 + 1);
            let paths = resimulate_subject_paths(q, &data.subjects[f], &state.latent[f], &mut rng)?;
            let stats = with_path_stats(&state.subject_stats[f], &paths);
            Ok((f, paths, stats))
        })
        .collect()
}

/// Draws the anchor pair, builds the launch state and assembles every term
/// of the acceptance ratio.
pub fn propose_split_merge<R: Rng + ?Sized>(
    state: &SamplerState,
    data: &Dataset,
    scorer: &Scorer,
    settings: SplitMergeSettings,
    rng: &mut R,
    streams: &RngStreams,
    iteration: u64,
    move_index: u64,
) -> Result<Proposal, SamplerError> {
    let n = state.labels.len();
    if n < 2 {
        return Err(SamplerError::InvalidState("split-merge needs at least two subjects".into()));
    }
    let d = rng.random_range(0..n);
    let mut e = rng.random_range(0..n - 1);
    if e >= d {
        e += 1;
    }
    let (cd, ce) = (state.labels[d], state.labels[e]);
    let members: Vec<usize> = (0..n)
        .filter(|&f| f != d && f != e && (state.labels[f] == cd || state.labels[f] == ce))
        .collect();
    let stats = &state.subject_stats;
    let alpha = scorer.spec.prior.dp_alpha;
    let stream_base = (move_index + 1) << 32;

    if cd == ce {
        let mut launch = build_launch_state(stats, d, e, members, settings.scans, scorer, rng)?;
        let log_q_split = launch.scan(stats, scorer, rng)?;
        let mut side_d = vec![d];
        let mut side_e = vec![e];
        for (&f, &w) in launch.members.iter().zip(&launch.with_d) {
            if w {
                side_d.push(f);
            } else {
                side_e.push(f);
            }
        }
        side_d.sort_unstable();
        side_e.sort_unstable();
        let mut merged: Vec<usize> = side_d.iter().chain(&side_e).copied().collect();
        merged.sort_unstable();

        let (updates, generators) = if settings.resimulate_paths {
            let q_d = sample_generator(&launch.stats_d, &scorer.spec.prior, rng)?;
            let q_e = sample_generator(&launch.stats_e, &scorer.spec.prior, rng)?;
            let mut up = resimulate_group(state, data, &q_d, &side_d, streams, iteration, stream_base)?;
            up.extend(resimulate_group(state, data, &q_e, &side_e, streams, iteration, stream_base)?);
            (up, Some((q_d, Some(q_e))))
        } else {
            (Vec::new(), None)
        };
        let new_stats = proposed_stats(stats, &updates);
        let log_lik_ratio = scorer.prefix_product(side_d.iter().map(|&f| new_stats[f]))?
            + scorer.prefix_product(side_e.iter().map(|&f| new_stats[f]))?
            - scorer.prefix_product(merged.iter().map(|&f| &stats[f]))?;

        let mut labels = state.labels.clone();
        for &f in &side_d {
            labels[f] = state.num_clusters();
        }
        Ok(Proposal {
            kind: MoveKind::Split,
            d,
            e,
            labels,
            log_proposal_ratio: -log_q_split,
            log_prior_ratio: split_log_prior_ratio(alpha, side_d.len(), side_e.len()),
            log_lik_ratio,
            updates,
            generators,
        })
    } else {
        let cluster_d: Vec<usize> = (0..n).filter(|&f| state.labels[f] == cd).collect();
        let cluster_e: Vec<usize> = (0..n).filter(|&f| state.labels[f] == ce).collect();
        let merged: Vec<usize> = (0..n).filter(|&f| state.labels[f] == cd || state.labels[f] == ce).collect();

        // With re-simulation the reverse split probability is scored on the
        // paths drawn under the merged generator.
        let (updates, generators, resimulated) = if settings.resimulate_paths {
            let total = accumulate_suffstats(
                scorer.spec.num_states,
                scorer.spec.num_levels,
                merged.iter().map(|&f| &stats[f]),
            );
            let q_m = sample_generator(&total, &scorer.spec.prior, rng)?;
            let up = resimulate_group(state, data, &q_m, &merged, streams, iteration, stream_base)?;
            let mut owned = stats.clone();
            for (f, _, s) in &up {
                owned[*f] = s.clone();
            }
            (up, Some((q_m, None)), Some(owned))
        } else {
            (Vec::new(), None, None)
        };
        let scan_stats = resimulated.as_deref().unwrap_or(stats.as_slice());
        let mut launch = build_launch_state(scan_stats, d, e, members, settings.scans, scorer, rng)?;
        let original: Vec<bool> = launch.members.iter().map(|&f| state.labels[f] == cd).collect();
        let log_q_reverse = launch.transition_log_prob(scan_stats, &original, scorer)?;
        let log_lik_ratio = scorer.prefix_product(merged.iter().map(|&f| &scan_stats[f]))?
            - scorer.prefix_product(cluster_d.iter().map(|&f| &stats[f]))?
            - scorer.prefix_product(cluster_e.iter().map(|&f| &stats[f]))?;

        let labels = state.labels.iter().map(|&l| if l == cd { ce } else { l }).collect();
        Ok(Proposal {
            kind: MoveKind::Merge,
            d,
            e,
            labels,
            log_proposal_ratio: log_q_reverse,
            log_prior_ratio: merge_log_prior_ratio(alpha, cluster_d.len(), cluster_e.len()),
            log_lik_ratio,
            updates,
            generators,
        })
    }
}

fn proposed_stats<'a>(
    stats: &'a [OutcomeSuffStats],
    updates: &'a [(usize, Vec<PathStats>, OutcomeSuffStats)],
) -> Vec<&'a OutcomeSuffStats> {
    let mut out: Vec<&OutcomeSuffStats> = stats.iter().collect();
    for (f, _, s) in updates {
        out[*f] = s;
    }
    out
}

/// Metropolis–Hastings decision; on acceptance the proposal's labels,
/// re-simulated paths and rate draws replace the current ones.
pub fn accept_or_reject<R: Rng + ?Sized>(
    state: &mut SamplerState,
    proposal: Proposal,
    rng: &mut R,
) -> bool {
    let log_a = proposal.log_acceptance();
    let accept = log_a >= 0.0 || rng.random::<f64>().ln() < log_a;
    if !accept {
        return false;
    }
    let cd = state.labels[proposal.d];
    let ce = state.labels[proposal.e];
    match proposal.kind {
        MoveKind::Split => {
            let mut fresh = state.cluster_params[cd].clone();
            if let Some((q_d, q_e)) = proposal.generators {
                fresh.q = q_d;
                if let Some(q_e) = q_e {
                    state.cluster_params[cd].q = q_e;
                }
            }
            state.cluster_params.push(fresh);
        }
        MoveKind::Merge => {
            if let Some((q_m, _)) = proposal.generators {
                state.cluster_params[ce].q = q_m;
            }
        }
    }
    state.labels = proposal.labels;
    for (f, paths, stats) in proposal.updates {
        state.latent[f].paths = paths;
        state.subject_stats[f] = stats;
    }
    state.canonicalize();
    true
}

/// Proposes and resolves one split-merge move; returns whether it was
/// accepted and its kind.
pub fn split_merge_step<R: Rng + ?Sized>(
    state: &mut SamplerState,
    data: &Dataset,
    scorer: &Scorer,
    settings: SplitMergeSettings,
    rng: &mut R,
    streams: &RngStreams,
    iteration: u64,
    move_index: u64,
) -> Result<(MoveKind, bool), SamplerError> {
    let proposal = propose_split_merge(state, data, scorer, settings, rng, streams, iteration, move_index)?;
    let kind = proposal.kind;
    Ok((kind, accept_or_reject(state, proposal, rng)))
}
