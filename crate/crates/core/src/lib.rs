//! Bayesian dark knowledge: SGLD posterior sampling for small MLPs with online
//! distillation of the posterior predictive into a single student network.
//!
//! Module map:
//! - [`nn`]: MLP forward/backward over flat parameter vectors
//! - [`objectives`]: likelihoods, priors, distillation losses
//! - [`samplers`]: SGD, SGLD and HMC
//! - [`distill`]: the joint teacher/student loop
//! - [`eval`]: predictive metrics, grids and KL
//! - [`data`]: synthetic generators and dataset loaders

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use nn::{Head, HeadKind, MlpSpec, ParamVector};
pub use objectives::{NoiseModel, Predictive};
pub use samplers::{ChainConfig, PosteriorEnsemble};
