use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::outcome::{Family, ModelSpec, PriorSpec, ThetaPrior};
use crate::sampler::{InitMethod, SamplerConfig, Variant};
use crate::sim::{builtin_example_config, Preset, SimConfig};

use super::IoError;

/// One TOML document configuring simulation and fitting. Every field is
/// optional; omitted fields take the defaults documented on each section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub sampler: SamplerSection,
    pub simulation: SimulationSection,
}

/// Defaults: Poisson outcomes, 3 latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `poisson` or `gaussian`.
    pub family: String,
    /// Known residual standard deviation of Gaussian outcomes.
    pub sigma: f64,
    pub num_states: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { family: "poisson".into(), sigma: 1.0, num_states: 3 }
    }
}

impl ModelConfig {
    pub fn family(&self) -> Result<Family, IoError> {
        match self.family.as_str() {
            "poisson" => Ok(Family::Poisson),
            "gaussian" => Ok(Family::Gaussian { sigma: self.sigma }),
            other => Err(IoError::ConfigParse(format!("unknown family `{other}`"))),
        }
    }
}

/// Scalar hyperparameters applied to every state or channel. Defaults:
/// Gamma(1, 1) on Poisson rates, Normal(0, 10^2) on Gaussian means,
/// Dirichlet(1, ..., 1) on the initial distribution, Gamma(1, 1) on every
/// off-diagonal rate, DP concentration 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub theta_shape: Option<f64>,
    pub theta_rate: Option<f64>,
    pub theta_mean: Option<f64>,
    pub theta_sd: Option<f64>,
    pub pi_concentration: Option<f64>,
    pub q_shape: Option<f64>,
    pub q_rate: Option<f64>,
    pub dp_alpha: Option<f64>,
}

impl PriorConfig {
    pub fn build(&self, family: Family, k: usize) -> PriorSpec {
        let mut p = PriorSpec::default_for(family, k);
        match &mut p.theta {
            ThetaPrior::Gamma { shape, rate } => {
                if let Some(a) = self.theta_shape {
                    shape.iter_mut().for_each(|v| *v = a);
                }
                if let Some(b) = self.theta_rate {
                    rate.iter_mut().for_each(|v| *v = b);
                }
            }
            ThetaPrior::Normal { mean, sd } => {
                if let Some(m) = self.theta_mean {
                    mean.iter_mut().for_each(|v| *v = m);
                }
                if let Some(s) = self.theta_sd {
                    sd.iter_mut().for_each(|v| *v = s);
                }
            }
        }
        if let Some(c) = self.pi_concentration {
            p.pi_concentration.iter_mut().for_each(|v| *v = c);
        }
        if let Some(a) = self.q_shape {
            p.q_shape.iter_mut().flatten().for_each(|v| *v = a);
        }
        if let Some(b) = self.q_rate {
            p.q_rate.iter_mut().for_each(|v| *v = b);
        }
        if let Some(alpha) = self.dp_alpha {
            p.dp_alpha = alpha;
        }
        p
    }
}

/// Defaults follow [`SamplerConfig::new`]: 1000 iterations, 300 burn-in,
/// thinning 1, 3 restricted scans, one initial cluster, seed 1, full
/// variant, no checkpoints, one Gibbs sweep and one split-merge move per
/// iteration, quantile warm start, state ordering on, frozen paths inside
/// split-merge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub iterations: Option<u64>,
    pub burn_in: Option<u64>,
    pub thin: Option<u64>,
    pub restricted_scans: Option<usize>,
    pub initial_clusters: Option<usize>,
    pub seed: Option<u64>,
    /// `full` or `q-only`.
    pub variant: Option<Variant>,
    pub checkpoint_interval: Option<u64>,
    pub gibbs_sweeps: Option<usize>,
    pub split_merge_moves: Option<usize>,
    /// `prior` or `quantile`.
    pub init: Option<InitMethod>,
    pub order_states: Option<bool>,
    pub resimulate_paths: Option<bool>,
}

impl SamplerSection {
    pub fn apply(&self, c: &mut SamplerConfig) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = self.$f { c.$g = v; })*};
        }
        set!(iterations => num_iterations, burn_in => burn_in, thin => thin,
            restricted_scans => restricted_scans, initial_clusters => initial_clusters, seed => seed,
            variant => variant, checkpoint_interval => checkpoint_interval, gibbs_sweeps => gibbs_sweeps,
            split_merge_moves => split_merge_moves, init => init, order_states => order_states,
            resimulate_paths => resimulate_paths);
    }
}

/// Either a named preset with optional overrides, or a complete explicit
/// design under `custom`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub preset: Option<String>,
    /// Observations per subject (default 50).
    pub num_observations: Option<usize>,
    pub subjects_per_cluster: Option<usize>,
    pub sigma: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub custom: Option<SimConfig>,
}

pub const DEFAULT_NUM_OBSERVATIONS: usize = 50;

impl SimulationSection {
    pub fn build(&self) -> Result<SimConfig, IoError> {
        let mut cfg = match (&self.custom, &self.preset) {
            (Some(c), None) => c.clone(),
            (None, Some(name)) => {
                let mut preset: Preset = name.parse().map_err(|_| IoError::UnknownPreset(name.clone()))?;
                if let (Preset::Ex2 { sigma }, Some(s)) = (&mut preset, self.sigma) {
                    *sigma = s;
                }
                builtin_example_config(preset, self.num_observations.unwrap_or(DEFAULT_NUM_OBSERVATIONS))
            }
            (Some(_), Some(_)) => {
                return Err(IoError::ConfigParse("give either `preset` or `custom`, not both".into()))
            }
            (None, None) => return Err(IoError::ConfigParse("no simulation preset or custom design".into())),
        };
        if self.custom.is_some() {
            if let Some(t) = self.num_observations {
                cfg.num_observations = t;
            }
        }
        if let (Family::Gaussian { sigma }, Some(s)) = (&mut cfg.family, self.sigma) {
            *sigma = s;
        }
        if let Some(n) = self.subjects_per_cluster {
            cfg = cfg.with_subjects_per_cluster(n);
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

impl ConfigFile {
    /// Fitting defaults matching a named design: outcome family, variant and
    /// restricted scans of the simulation presets, and the four-state
    /// informative-rate setting (`copd`, Gamma(20, 500) on every rate).
    pub fn for_preset(name: &str, sigma: Option<f64>) -> Result<Self, IoError> {
        let mut c = ConfigFile::default();
        let (family, scans) = match name {
            "ex1-poisson" => ("poisson", 3),
            "ex1-gaussian" => ("gaussian", 3),
            "ex2" => {
                c.sampler.variant = Some(Variant::QOnly);
                ("gaussian", 5)
            }
            "ex3" => ("poisson", 2),
            "copd" => {
                c.model.num_states = 4;
                c.prior.q_shape = Some(20.0);
                c.prior.q_rate = Some(500.0);
                ("poisson", 2)
            }
            other => return Err(IoError::UnknownPreset(other.to_string())),
        };
        c.model.family = family.into();
        if let Some(s) = sigma {
            c.model.sigma = s;
        }
        c.sampler.restricted_scans = Some(scans);
        if name != "copd" {
            c.simulation.preset = Some(name.into());
            c.simulation.sigma = sigma;
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::ConfigParse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sampler configuration for data with `num_levels` factor levels.
    pub fn sampler_config(&self, num_levels: usize) -> Result<SamplerConfig, IoError> {
        let family = self.model.family()?;
        let k = self.model.num_states;
        let prior = self.prior.build(family, k);
        let spec = ModelSpec::new(family, k, num_levels, prior).map_err(|e| IoError::ConfigParse(e.to_string()))?;
        let mut c = SamplerConfig::new(spec);
        self.sampler.apply(&mut c);
        c.validate().map_err(|e| IoError::ConfigParse(e.to_string()))?;
        Ok(c)
    }
}
