//! Collapsed Pólya-urn label updates.

use rand::Rng;

use crate::outcome::{
    marginal_loglik_q, sample_cluster_params, sample_generator, subject_marginal_loglik, ClusterParams, ModelSpec,
    OutcomeSuffStats,
};
use crate::rng::{categorical, normalize_log_weights};

use super::state::{canonical_labels, SamplerState, SharedParams};
use super::SamplerError;

/// Cluster-conditional marginal likelihood of one subject's statistics.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub spec: &'a ModelSpec,
    /// Score the generator block only.
    pub q_only: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(spec: &'a ModelSpec, q_only: bool) -> Self {
        Self { spec, q_only }
    }

    pub fn marginal(&self, others: &OutcomeSuffStats, subject: &OutcomeSuffStats) -> Result<f64, SamplerError> {
        Ok(if self.q_only {
            marginal_loglik_q(others, subject, &self.spec.prior)?
        } else {
            subject_marginal_loglik(others, subject, self.spec)?
        })
    }

    /// `sum_f log ∫ L_f dH_f` with `H_f` the prior updated by the subjects
    /// preceding `f` in the given order.
    pub fn prefix_product<'s>(
        &self,
        members: impl IntoIterator<Item = &'s OutcomeSuffStats>,
    ) -> Result<f64, SamplerError> {
        let mut acc = OutcomeSuffStats::zeros(self.spec.num_states, self.spec.num_levels);
        let mut total = 0.0;
        for s in members {
            total += self.marginal(&acc, s)?;
            acc += s;
        }
        Ok(total)
    }
}

/// Probabilities of joining each cluster (given its statistics and size with
/// the subject removed) followed by the probability of opening a new one.
/// Clusters of size zero get probability zero.
pub fn label_conditional(
    cluster_stats: &[OutcomeSuffStats],
    sizes: &[usize],
    subject: &OutcomeSuffStats,
    scorer: &Scorer,
) -> Result<Vec<f64>, SamplerError> {
    let mut logw = Vec::with_capacity(sizes.len() + 1);
    for (stats, &size) in cluster_stats.iter().zip(sizes) {
        if size == 0 {
            logw.push(f64::NEG_INFINITY);
        } else {
            logw.push((size as f64).ln() + scorer.marginal(stats, subject)?);
        }
    }
    let empty = OutcomeSuffStats::zeros(subject.num_states, subject.num_levels);
    logw.push(scorer.spec.prior.dp_alpha.ln() + scorer.marginal(&empty, subject)?);
    normalize_log_weights(&mut logw);
    Ok(logw)
}

/// Mutable view of the labels during a sweep; emptied clusters keep their
/// slot until the sweep is folded back into the state.
pub struct LabelWorkspace<'a> {
    scorer: Scorer<'a>,
    subject_stats: &'a [OutcomeSuffStats],
    shared: Option<&'a SharedParams>,
    pub labels: Vec<usize>,
    pub stats: Vec<OutcomeSuffStats>,
    pub sizes: Vec<usize>,
    pub params: Vec<Option<ClusterParams>>,
}

impl<'a> LabelWorkspace<'a> {
    pub fn new(
        labels: Vec<usize>,
        params: Vec<ClusterParams>,
        subject_stats: &'a [OutcomeSuffStats],
        shared: Option<&'a SharedParams>,
        scorer: Scorer<'a>,
    ) -> Self {
        let spec = scorer.spec;
        let mut stats = vec![OutcomeSuffStats::zeros(spec.num_states, spec.num_levels); params.len()];
        let mut sizes = vec![0; params.len()];
        for (s, &l) in subject_stats.iter().zip(&labels) {
            stats[l] += s;
            sizes[l] += 1;
        }
        Self { scorer, subject_stats, shared, labels, stats, sizes, params: params.into_iter().map(Some).collect() }
    }

    /// Workspace over a copy of the state's labels and parameters.
    pub fn from_state(state: &'a SamplerState, scorer: Scorer<'a>) -> Self {
        Self::new(
            state.labels.clone(),
            state.cluster_params.clone(),
            &state.subject_stats,
            state.shared.as_ref(),
            scorer,
        )
    }

    /// Conditional label probabilities of subject `n` with `n` removed;
    /// the final entry is the new-cluster probability.
    pub fn conditional(&mut self, n: usize) -> Result<Vec<f64>, SamplerError> {
        self.remove(n);
        let probs = label_conditional(&self.stats, &self.sizes, &self.subject_stats[n], &self.scorer);
        self.insert(n, self.labels[n]);
        probs
    }

    fn remove(&mut self, n: usize) {
        let c = self.labels[n];
        self.stats[c] -= &self.subject_stats[n];
        self.sizes[c] -= 1;
    }

    fn insert(&mut self, n: usize, c: usize) {
        self.stats[c] += &self.subject_stats[n];
        self.sizes[c] += 1;
        self.labels[n] = c;
    }

    /// Resamples the label of subject `n`; returns the new slot index.
    pub fn update<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<usize, SamplerError> {
        self.remove(n);
        let old = self.labels[n];
        if self.sizes[old] == 0 {
            self.params[old] = None;
            let (k, l) = (self.stats[old].num_states, self.stats[old].num_levels);
            self.stats[old] = OutcomeSuffStats::zeros(k, l);
        }
        let probs = label_conditional(&self.stats, &self.sizes, &self.subject_stats[n], &self.scorer)?;
        let pick = categorical(&probs, rng).expect("label probabilities are normalized");
        let slot = if pick == self.sizes.len() {
            let params = self.fresh_params(n, rng)?;
            match self.sizes.iter().position(|&s| s == 0) {
                Some(free) => {
                    self.params[free] = Some(params);
                    free
                }
                None => {
                    self.stats.push(OutcomeSuffStats::zeros(self.scorer.spec.num_states, self.scorer.spec.num_levels));
                    self.sizes.push(0);
                    self.params.push(Some(params));
                    self.sizes.len() - 1
                }
            }
        } else {
            pick
        };
        self.insert(n, slot);
        Ok(slot)
    }

    /// Parameters of a newly opened cluster, drawn from the posterior given
    /// its first member.
    fn fresh_params<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ClusterParams, SamplerError> {
        let stats = &self.subject_stats[n];
        Ok(match self.shared {
            Some(shared) => ClusterParams {
                pi: shared.pi.clone(),
                q: sample_generator(stats, &self.scorer.spec.prior, rng)?,
                outcome: shared.outcome.clone(),
            },
            None => sample_cluster_params(stats, self.scorer.spec, rng)?,
        })
    }

    /// Canonical labels and the matching parameter sets.
    pub fn finish(self) -> (Vec<usize>, Vec<ClusterParams>) {
        let (labels, order) = canonical_labels(&self.labels);
        let mut params = self.params;
        let params = order
            .iter()
            .map(|&slot| params[slot].take().expect("occupied clusters have parameters"))
            .collect();
        (labels, params)
    }
}

/// One full sweep over subjects in ascending index order.
pub fn gibbs_label_sweep<R: Rng + ?Sized>(
    state: &mut SamplerState,
    scorer: Scorer,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let labels = std::mem::take(&mut state.labels);
    let params = std::mem::take(&mut state.cluster_params);
    let mut ws = LabelWorkspace::new(labels, params, &state.subject_stats, state.shared.as_ref(), scorer);
    for n in 0..state.subject_stats.len() {
        ws.update(n, rng)?;
    }
    let (labels, params) = ws.finish();
    state.labels = labels;
    state.cluster_params = params;
    Ok(())
}
