//! Tabular softmax policy, REINFORCE with aggregated advantages, an online loop scored
//! by the reward table, and executable variance and bias checks.

pub mod diagnostics;
pub mod gradient;
pub mod mdp;
pub mod offline;
pub mod online;
pub mod policy;

use crate::aggregate::AggregateError;
use crate::embed::EmbedError;
use crate::envs::EnvError;
use thiserror::Error;

pub use gradient::{estimate_policy_gradient, policy_steps, GradEstimate, StepRef};
pub use offline::{train_offline, OfflineConfig};
pub use policy::{ActMode, PolicyActor, PolicyParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("context {0:?} is unknown to the policy")]
    UnknownContext(Vec<u32>),
    #[error("action {action} outside 0..{num_actions}")]
    UnknownAction { action: usize, num_actions: usize },
    #[error("trajectory {traj} step {step}: {msg}")]
    Unresolvable { traj: usize, step: usize, msg: String },
    #[error("non-finite loss at epoch {epoch} (batch {batch})")]
    NonFinite { epoch: usize, batch: usize },
    #[error("degenerate generator: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("mdp: {0}")]
    Mdp(String),
    #[error("{0} is not ε-bisimilar")]
    NotBisimilar(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}
