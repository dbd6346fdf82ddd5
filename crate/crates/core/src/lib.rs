//! Intention-space reward aggregation for sparse-reward, free-form language-action
//! reinforcement learning.
//!
//! Utterances are embedded ([`embed`]), clustered with average-linkage HAC ([`hac`]),
//! and trajectories are projected onto cluster labels so that discounted terminal
//! rewards can be pooled over semantically equivalent (history, action) pairs
//! ([`aggregate`]). The clustering granularity is chosen by reward sensitivity
//! ([`granularity`]) and the pooled advantages drive an offline REINFORCE learner
//! ([`train`]) on desk-scale dialogue games ([`envs`]).

pub mod aggregate;
pub mod embed;
pub mod envs;
pub mod granularity;
pub mod hac;
pub mod io;
pub mod metrics;
pub mod traj;
pub mod train;
