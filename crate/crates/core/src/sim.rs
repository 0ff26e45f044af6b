//! Synthetic longitudinal data from known mixtures of continuous-time HMMs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{CtmcError, GeneratorMatrix, InitialDistribution};
use crate::data::{DataError, Dataset, SubjectRecord};
use crate::outcome::{ClusterParams, Family, OutcomeError, OutcomeModel};
use crate::path::{simulate_forward_path, PathError, PathStats};
use crate::rng::{categorical, Purpose, RngStreams};

/// Nudge applied to coincident observation times.
pub const TIME_TIE_NUDGE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown preset `{0}` (expected ex1-poisson, ex1-gaussian, ex2 or ex3)")]
    UnknownPreset(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Preset {
    Ex1Poisson,
    Ex1Gaussian,
    /// Clusters differ only through their generators; Gaussian outcomes.
    Ex2 { sigma: f64 },
    /// Poisson outcomes modified by a three-level time-varying factor.
    Ex3,
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ex1-poisson" => Ok(Preset::Ex1Poisson),
            "ex1-gaussian" => Ok(Preset::Ex1Gaussian),
            "ex2" => Ok(Preset::Ex2 { sigma: 1.0 }),
            "ex3" => Ok(Preset::Ex3),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Ex1Poisson => "ex1-poisson",
            Preset::Ex1Gaussian => "ex1-gaussian",
            Preset::Ex2 { .. } => "ex2",
            Preset::Ex3 => "ex3",
        })
    }
}

/// One generating component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCluster {
    pub pi: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    /// Link-scale coefficients: row 0 holds the per-state intercepts, row
    /// `l >= 1` the contrasts of factor level `l` against level 0.
    pub coefficients: Vec<Vec<f64>>,
    pub subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub family: Family,
    pub clusters: Vec<SimCluster>,
    /// Observations per subject, the first at time 0.
    pub num_observations: usize,
    pub horizon: f64,
    /// Level probabilities of the time-varying factor, if any.
    pub covariate_probs: Option<Vec<f64>>,
    pub seed: u64,
}

pub const Q1: [[f64; 3]; 3] = [[-2.5, 2.0, 0.5], [0.5, -1.5, 1.0], [0.1, 0.9, -1.0]];
pub const Q2: [[f64; 3]; 3] = [[-1.2, 1.0, 0.2], [1.4, -1.5, 0.1], [0.05, 0.2, -0.25]];
pub const Q3: [[f64; 3]; 3] = [[-0.5, 0.49, 0.01], [0.25, -0.3, 0.05], [0.01, 0.1, -0.11]];
pub const PI1: [f64; 3] = [0.5, 0.4, 0.1];
pub const PI2: [f64; 3] = [0.3, 0.5, 0.2];
pub const PI3: [f64; 3] = [0.45, 0.45, 0.1];
const GAUSSIAN_B: [[f64; 3]; 3] = [[-4.0, 0.0, 5.0], [-5.5, 0.5, 5.5], [-5.0, 1.0, 4.8]];
const POISSON_B: [[f64; 3]; 3] = [[-2.0, 1.2, 3.0], [-1.0, 1.0, 2.5], [-1.5, 1.1, 2.8]];
const FACTOR_B: [[[f64; 3]; 3]; 3] = [
    [[-2.0, 1.2, 3.0], [-0.3, 0.0, 0.0], [0.5, -0.1, -0.1]],
    [[-1.0, 1.0, 2.5], [0.4, -0.2, -0.5], [-0.1, 0.0, -0.4]],
    [[-1.5, 1.1, 2.8], [1.0, 0.1, -0.1], [-0.5, 0.1, -0.5]],
];

fn rows<const N: usize>(m: &[[f64; N]]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.to_vec()).collect()
}

/// Published parameter sets of the three simulation designs, with 1000
/// subjects per cluster (300/500/200 for the factor design), horizon 15 and
/// `t` observations per subject.
pub fn builtin_example_config(which: Preset, t: usize) -> SimConfig {
    let qs = [Q1, Q2, Q3];
    let pis = [PI1, PI2, PI3];
    let (family, clusters, covariate_probs) = match which {
        Preset::Ex1Poisson | Preset::Ex1Gaussian => {
            let (family, b) = if which == Preset::Ex1Poisson {
                (Family::Poisson, POISSON_B)
            } else {
                (Family::Gaussian { sigma: 1.0 }, GAUSSIAN_B)
            };
            let clusters = (0..3)
                .map(|c| SimCluster {
                    pi: pis[c].to_vec(),
                    q: rows(&qs[c]),
                    coefficients: vec![b[c].to_vec()],
                    subjects: 1000,
                })
                .collect();
            (family, clusters, None)
        }
        Preset::Ex2 { sigma } => {
            let clusters = (0..3)
                .map(|c| SimCluster {
                    pi: PI1.to_vec(),
                    q: rows(&qs[c]),
                    coefficients: vec![GAUSSIAN_B[0].to_vec()],
                    subjects: 1000,
                })
                .collect();
            (Family::Gaussian { sigma }, clusters, None)
        }
        Preset::Ex3 => {
            let sizes = [300, 500, 200];
            let clusters = (0..3)
                .map(|c| SimCluster {
                    pi: pis[c].to_vec(),
                    q: rows(&qs[c]),
                    coefficients: rows(&FACTOR_B[c]),
                    subjects: sizes[c],
                })
                .collect();
            (Family::Poisson, clusters, Some(vec![0.25, 0.25, 0.5]))
        }
    };
    SimConfig { family, clusters, num_observations: t, horizon: 15.0, covariate_probs, seed: 1 }
}

impl SimConfig {
    pub fn num_states(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.pi.len())
    }

    pub fn num_levels(&self) -> usize {
        self.covariate_probs.as_ref().map_or(1, |p| p.len())
    }

    pub fn num_subjects(&self) -> usize {
        self.clusters.iter().map(|c| c.subjects).sum()
    }

    pub fn with_subjects_per_cluster(mut self, n: usize) -> Self {
        for c in self.clusters.iter_mut() {
            c.subjects = n;
        }
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.clusters.is_empty() {
            return bad("no clusters".into());
        }
        if self.num_observations == 0 {
            return bad("need at least one observation per subject".into());
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive".into());
        }
        if let Some(p) = &self.covariate_probs {
            if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("covariate probabilities must be a distribution".into());
            }
        }
        let k = self.num_states();
        for (i, c) in self.clusters.iter().enumerate() {
            if c.subjects == 0 {
                return bad(format!("cluster {} has no subjects", i + 1));
            }
            if c.pi.len() != k || c.q.len() != k {
                return bad(format!("cluster {} has mismatched state dimensions", i + 1));
            }
            if c.coefficients.len() != self.num_levels() || c.coefficients.iter().any(|r| r.len() != k) {
                return bad(format!(
                    "cluster {} needs {} coefficient rows of length {k}",
                    i + 1,
                    self.num_levels()
                ));
            }
            self.cluster_params(i)?;
        }
        Ok(())
    }

    /// True `(pi, Q, theta)` of cluster `c`.
    pub fn cluster_params(&self, c: usize) -> Result<ClusterParams, SimError> {
        let cl = &self.clusters[c];
        let k = cl.pi.len();
        let levels = self.num_levels();
        let mut cells = Vec::with_capacity(k * levels);
        for state in 0..k {
            for level in 0..levels {
                let eta = cl.coefficients[0][state] + if level > 0 { cl.coefficients[level][state] } else { 0.0 };
                cells.push(match self.family {
                    Family::Poisson => eta.exp(),
                    Family::Gaussian { .. } => eta,
                });
            }
        }
        Ok(ClusterParams {
            pi: InitialDistribution::new(cl.pi.clone())?,
            q: GeneratorMatrix::from_rows(&cl.q)?,
            outcome: OutcomeModel::new(self.family, k, levels, cells)?,
        })
    }
}

/// Generating quantities hidden from the fitting code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// Zero-based generating cluster of each subject.
    pub labels: Vec<usize>,
    /// Latent state at each observation time.
    pub states: Vec<Vec<usize>>,
    /// Path statistics of each interval between observations.
    pub paths: Vec<Vec<PathStats>>,
    pub clusters: Vec<ClusterParams>,
}

/// Observation times: 0 followed by `t - 1` sorted uniform draws on
/// `(0, horizon)`, with ties nudged apart.
pub fn observation_times<R: Rng + ?Sized>(t: usize, horizon: f64, rng: &mut R) -> Vec<f64> {
    let mut times = Vec::with_capacity(t);
    if t == 0 {
        return times;
    }
    times.push(0.0);
    let mut rest: Vec<f64> = (1..t).map(|_| rng.random::<f64>() * horizon).collect();
    rest.sort_by(f64::total_cmp);
    times.extend(rest);
    loop {
        let mut changed = false;
        for i in 1..times.len() {
            if times[i] <= times[i - 1] {
                times[i] = times[i - 1] + TIME_TIE_NUDGE;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        times.sort_by(f64::total_cmp);
    }
    times
}

fn draw_outcome<R: Rng + ?Sized>(model: &OutcomeModel, state: usize, level: usize, rng: &mut R) -> f64 {
    let mean = model.cell(state, level);
    match model.family {
        Family::Poisson => Poisson::new(mean).expect("positive Poisson rate").sample(rng),
        Family::Gaussian { sigma } => Normal::new(mean, sigma).expect("finite normal").sample(rng),
    }
}

/// Simulates every subject of `config`; subjects are numbered cluster by
/// cluster.
pub fn generate_dataset(config: &SimConfig) -> Result<(Dataset, SimTruth), SimError> {
    config.validate()?;
    let params: Vec<ClusterParams> =
        (0..config.clusters.len()).map(|c| config.cluster_params(c)).collect::<Result<_, _>>()?;
    let labels: Vec<usize> =
        config.clusters.iter().enumerate().flat_map(|(c, cl)| std::iter::repeat_n(c, cl.subjects)).collect();
    let streams = RngStreams::new(config.seed);
    let width = labels.len().to_string().len().max(4);

    let simulated: Vec<_> = labels
        .par_iter()
        .enumerate()
        .map(|(n, &c)| {
            let p = &params[c];
            let mut time_rng = streams.stream(0, Purpose::SimulateTimes, n as u64);
            let times = observation_times(config.num_observations, config.horizon, &mut time_rng);
            let mut rng = streams.stream(0, Purpose::Simulate, n as u64);
            let levels = config.covariate_probs.as_ref().map(|probs| {
                (0..times.len()).map(|_| categorical(probs, &mut rng).expect("valid level probabilities")).collect()
            });
            let mut state = categorical(p.pi.probs(), &mut rng).expect("valid initial distribution");
            let mut states = vec![state];
            let mut paths = Vec::with_capacity(times.len().saturating_sub(1));
            for w in times.windows(2) {
                let seg = simulate_forward_path(&p.q, w[1] - w[0], state, &mut rng)?;
                state = seg.end_state;
                states.push(state);
                paths.push(seg.stats);
            }
            let outcomes = states
                .iter()
                .enumerate()
                .map(|(t, &s)| {
                    let level = levels.as_ref().map_or(0, |l: &Vec<usize>| l[t]);
                    draw_outcome(&p.outcome, s, level, &mut rng)
                })
                .collect();
            let record = SubjectRecord::new(format!("s{:0width$}", n + 1), times, outcomes, levels)?;
            Ok::<_, SimError>((record, states, paths))
        })
        .collect::<Result<_, _>>()?;

    let mut subjects = Vec::with_capacity(simulated.len());
    let mut states = Vec::with_capacity(simulated.len());
    let mut paths = Vec::with_capacity(simulated.len());
    for (r, s, p) in simulated {
        subjects.push(r);
        states.push(s);
        paths.push(p);
    }
    Ok((Dataset::new(subjects)?, SimTruth { labels, states, paths, clusters: params }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_values() {
        let c = builtin_example_config(Preset::Ex1Poisson, 50);
        assert_eq!(c.num_subjects(), 3000);
        assert_eq!(c.clusters[1].coefficients[0], vec![-1.0, 1.0, 2.5]);
        assert_eq!(c.clusters[2].q[0], vec![-0.5, 0.49, 0.01]);
        let g = builtin_example_config(Preset::Ex1Gaussian, 50);
        assert_eq!(g.family, Family::Gaussian { sigma: 1.0 });
        assert_eq!(g.clusters[0].coefficients[0], vec![-4.0, 0.0, 5.0]);
        let e3 = builtin_example_config(Preset::Ex3, 100);
        let sizes: Vec<usize> = e3.clusters.iter().map(|c| c.subjects).collect();
        assert_eq!(sizes, vec![300, 500, 200]);
        assert!(e3.validate().is_ok());
        let e2 = builtin_example_config(Preset::Ex2 { sigma: 0.5 }, 100);
        assert!(e2.clusters.iter().all(|c| c.pi == PI1.to_vec()));
        assert!("ex9".parse::<Preset>().is_err());
    }

    #[test]
    fn factor_cells_use_dummy_coding() {
        let c = builtin_example_config(Preset::Ex3, 10);
        let p = c.cluster_params(0).unwrap();
        assert!((p.outcome.cell(0, 0) - (-2f64).exp()).abs() < 1e-15);
        assert!((p.outcome.cell(0, 1) - (-2.3f64).exp()).abs() < 1e-15);
        assert!((p.outcome.cell(2, 2) - (2.9f64).exp()).abs() < 1e-12);
        let b = p.outcome.coefficients();
        assert!((b[1][0] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_observation_at_zero() {
        let c = builtin_example_config(Preset::Ex1Poisson, 1).with_subjects_per_cluster(2);
        let (d, t) = generate_dataset(&c).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d.subjects.iter().all(|s| s.times == vec![0.0]));
        assert_eq!(t.labels, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn reproducible() {
        let c = builtin_example_config(Preset::Ex3, 20).with_subjects_per_cluster(5);
        let (a, _) = generate_dataset(&c).unwrap();
        let (b, _) = generate_dataset(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.subjects.iter().all(|s| s.times[0] == 0.0 && s.levels.is_some()));
    }

    #[test]
    fn pooled_paths_recover_generators() {
        let c = builtin_example_config(Preset::Ex2 { sigma: 0.5 }, 30).with_subjects_per_cluster(400);
        let (_, truth) = generate_dataset(&c).unwrap();
        for (cluster, q) in [Q1, Q2, Q3].iter().enumerate() {
            let mut total = PathStats::empty(3);
            for (f, paths) in truth.paths.iter().enumerate() {
                if truth.labels[f] == cluster {
                    paths.iter().for_each(|p| total.accumulate(p));
                }
            }
            for l in 0..3 {
                for m in (0..3).filter(|&m| m != l) {
                    let n = total.jumps(l, m) as f64;
                    let mle = n / total.holding(l);
                    // Four Poisson standard errors on the jump count.
                    let tol = 4.0 * n.sqrt().max(1.0) / total.holding(l);
                    assert!((mle - q[l][m]).abs() < tol, "cluster {cluster} rate {l}->{m}: {mle} vs {}", q[l][m]);
                }
            }
        }
    }

    #[test]
    fn tie_nudging() {
        struct Zero;
        impl rand::RngCore for Zero {
            fn next_u32(&mut self) -> u32 {
                0
            }
            fn next_u64(&mut self) -> u64 {
                0
            }
            fn fill_bytes(&mut self, dst: &mut [u8]) {
                dst.fill(0);
            }
        }
        let t = observation_times(4, 15.0, &mut Zero);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t[0], 0.0);
    }
}
