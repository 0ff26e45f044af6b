//! Collapsed Gibbs and split-merge MCMC for the Dirichlet-process mixture.

mod gibbs;
mod paths;
mod run;
mod split_merge;
mod state;

use thiserror::Error;

use crate::ctmc::CtmcError;
use crate::data::DataError;
use crate::hmm::HmmError;
use crate::outcome::OutcomeError;
use crate::path::PathError;

pub use gibbs::{gibbs_label_sweep, label_conditional, LabelWorkspace, Scorer};
pub use paths::{draw_subject_latent, resimulate_subject_paths, with_path_stats};
pub use run::{init_state, refresh_cluster_params, run_mcmc, MoveCounts, PhaseTimings, Sampler};
pub use split_merge::{
    accept_or_reject, build_launch_state, merge_log_prior_ratio, propose_split_merge, split_log_prior_ratio,
    split_merge_step, LaunchState, MoveKind, Proposal, SplitMergeSettings,
};
pub use state::{
    canonical_labels, InitMethod, PosteriorSample, SamplerConfig, SamplerState, SharedParams, SubjectLatent, Variant,
};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid sampler state: {0}")]
    InvalidState(String),
    #[error("dataset does not match the model: {0}")]
    DataModelMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error("checkpoint failure: {0}")]
    Checkpoint(String),
}
