//! Clustering of irregularly sampled longitudinal trajectories with a
//! Dirichlet-process mixture of continuous-time hidden Markov models.

pub mod ctmc;
pub mod data;
pub mod hmm;
pub mod outcome;
pub mod path;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod diagnostics;
pub mod io;
