//! Tabular offline federated reinforcement learning with a vote-based
//! conservative critic and advantage-weighted policy improvement, plus
//! exact dynamic-programming oracles and numeric audits of the method's
//! conservatism and policy-improvement bounds.
//!
//! The crate is organized along the pipeline:
//!
//! - [`mdp`]: finite MDPs, exact evaluation, occupancies, divergences;
//! - [`data`]: behavior policies, dataset logging, empirical models;
//! - [`learner`]: the vote mechanism, conservative evaluation, improvement;
//! - [`federation`]: aggregation, the round loop, baselines and ablations;
//! - [`audit`]: closed-form bounds checked against the oracles.
//!
//! Everything is deterministic given seeds, including parallel client
//! scheduling.

// Validation uses negated range comparisons (`!(x > 0.0)`) so that NaN
// inputs are rejected rather than silently accepted.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod data;
pub mod error;
pub mod federation;
pub mod learner;
mod linalg;
pub mod mdp;

pub use error::{Error, Result};
