//! Adaptive noisy group testing: Bayesian posterior over infection states,
//! utility-driven batch design, decoders, policies and a simulation harness.

pub mod decoder;
pub mod error;
pub mod math;
pub mod model;
pub mod optimizer;
pub mod policies;
pub mod posterior;
pub mod simulator;
pub mod utility;

pub use error::{Error, Result};
pub use model::{
    batch_log_likelihood, group_status, sample_outcomes, test_log_likelihood, Group, GroupBatch, NoiseModel, Prior,
    StateVector, TestOutcomes, MAX_POPULATION,
};
