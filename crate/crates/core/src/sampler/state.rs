use serde::{Deserialize, Serialize};

use crate::ctmc::{GeneratorMatrix, InitialDistribution};
use crate::outcome::{ClusterParams, ModelSpec, OutcomeModel, OutcomeSuffStats};
use crate::path::PathStats;

use super::SamplerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cluster-specific `(pi, Q, theta)`.
    Full,
    /// Cluster-specific `Q`; `pi` and `theta` shared by every subject.
    QOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// Every initial cluster draws its parameters from the prior.
    Prior,
    /// Outcome cells from pooled-outcome quantile groups, uniform `pi`,
    /// prior-mean rates.
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub model: ModelSpec,
    pub num_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub restricted_scans: usize,
    pub initial_clusters: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_interval: u64,
    pub gibbs_sweeps: usize,
    pub split_merge_moves: usize,
    pub init: InitMethod,
    /// Relabel latent states by ascending baseline outcome mean after each
    /// parameter refresh.
    pub order_states: bool,
    /// Re-simulate member paths under freshly drawn rates inside split-merge
    /// proposals. Off by default: the acceptance ratio then targets the label
    /// posterior given the current paths exactly.
    pub resimulate_paths: bool,
}

impl SamplerConfig {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            num_iterations: 1000,
            burn_in: 300,
            thin: 1,
            restricted_scans: 3,
            initial_clusters: 1,
            seed: 1,
            variant: Variant::Full,
            checkpoint_interval: 0,
            gibbs_sweeps: 1,
            split_merge_moves: 1,
            init: InitMethod::Quantile,
            order_states: true,
            resimulate_paths: false,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if self.num_iterations < self.burn_in {
            return bad("num_iterations must be at least burn_in");
        }
        if self.thin == 0 {
            return bad("thin must be positive");
        }
        if self.restricted_scans == 0 {
            return bad("restricted_scans must be at least 1");
        }
        if self.initial_clusters == 0 {
            return bad("initial_clusters must be at least 1");
        }
        self.model.prior.validate(self.model.family).map_err(|e| SamplerError::InvalidConfig(e.to_string()))
    }

    pub fn q_only(&self) -> bool {
        self.variant == Variant::QOnly
    }

    pub fn is_retained(&self, iteration: u64) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Latent quantities of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatent {
    /// Latent state at each observation.
    pub states: Vec<usize>,
    /// `(start, end)` states used to condition each interval's path.
    pub endpoints: Vec<(usize, usize)>,
    pub paths: Vec<PathStats>,
}

/// `pi` and outcome parameters shared across clusters in the Q-only variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub pi: InitialDistribution,
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub iteration: u64,
    /// Zero-based labels, canonical in order of first appearance.
    pub labels: Vec<usize>,
    pub latent: Vec<SubjectLatent>,
    /// Indexed by label.
    pub cluster_params: Vec<ClusterParams>,
    pub shared: Option<SharedParams>,
    /// Per-subject sufficient statistics of the current latent quantities.
    pub subject_stats: Vec<OutcomeSuffStats>,
}

impl SamplerState {
    pub fn num_clusters(&self) -> usize {
        self.cluster_params.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }

    /// Totals of the subject statistics per cluster, summed in subject order.
    pub fn cluster_stats(&self) -> Vec<OutcomeSuffStats> {
        let (k, l) = (self.subject_stats[0].num_states, self.subject_stats[0].num_levels);
        let mut out = vec![OutcomeSuffStats::zeros(k, l); self.num_clusters()];
        for (s, &label) in self.subject_stats.iter().zip(&self.labels) {
            out[label] += s;
        }
        out
    }

    /// Renumbers labels by first appearance and drops parameter sets of
    /// empty clusters.
    pub fn canonicalize(&mut self) {
        let (labels, order) = canonical_labels(&self.labels);
        self.labels = labels;
        self.cluster_params = order.iter().map(|&old| self.cluster_params[old].clone()).collect();
    }

    /// Checks the structural invariants of the state.
    pub fn check(&self) -> Result<(), SamplerError> {
        let n = self.labels.len();
        if self.latent.len() != n || self.subject_stats.len() != n {
            return Err(SamplerError::InvalidState("per-subject vectors differ in length".into()));
        }
        let (canon, _) = canonical_labels(&self.labels);
        if canon != self.labels {
            return Err(SamplerError::InvalidState("labels are not canonical".into()));
        }
        let m = self.labels.iter().copied().max().map_or(0, |x| x + 1);
        if m != self.cluster_params.len() {
            return Err(SamplerError::InvalidState(format!(
                "{m} labels but {} parameter sets",
                self.cluster_params.len()
            )));
        }
        Ok(())
    }
}

/// Labels renumbered by first appearance, and the old label of each new one.
pub fn canonical_labels(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let max = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut map = vec![usize::MAX; max];
    let mut order = Vec::new();
    let out = labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = order.len();
                order.push(l);
            }
            map[l]
        })
        .collect();
    (out, order)
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub iteration: u64,
    pub num_clusters: usize,
    /// Zero-based labels.
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterParams>,
}

impl PosteriorSample {
    pub fn from_state(state: &SamplerState) -> Self {
        Self {
            iteration: state.iteration,
            num_clusters: state.num_clusters(),
            labels: state.labels.clone(),
            clusters: state.cluster_params.clone(),
        }
    }

    pub fn generators(&self) -> Vec<&GeneratorMatrix> {
        self.clusters.iter().map(|c| &c.q).collect()
    }
}
