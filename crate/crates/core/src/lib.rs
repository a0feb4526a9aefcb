//! Counterfactual learning and evaluation of linear Gibbs policies from
//! bandit logs of structured outputs.
//!
//! Logged triples `(x_t, y_t, Δ_t)` come from a historic policy that either
//! emitted its one-best output (deterministic logging) or sampled from its
//! distribution (stochastic logging). The crate provides:
//!
//! * [`policy`]: the Gibbs policy, sampling, and `∇log π`;
//! * [`estimators`]: DPM, DPM+R/IPS+R, DC/DR, ĉDC/ĉDR and IPS objectives
//!   with analytic gradients;
//! * [`reward_model`]: random-forest and ridge direct reward models;
//! * [`metrics`]: sentence/corpus BLEU and approximate randomization tests;
//! * [`sim`]: synthetic structured tasks with exact enumeration ground truth;
//! * [`trainer`] and [`evaluator`]: policy learning and policy evaluation;
//! * [`cli`]: the `cflearn` command-line pipeline.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod evaluator;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod reward_model;
pub mod sim;
pub mod trainer;

pub use data::{Candidate, Dataset, Instance, LogEntry, LogMode, Split};
pub use error::{Error, Result};
pub use estimators::{Batch, Estimate, Objective};
pub use policy::GibbsPolicy;
pub use reward_model::{RewardModel, RewardModelConfig, RewardPredictor, Tabulated};
