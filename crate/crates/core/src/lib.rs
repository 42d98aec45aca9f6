//! Reliability analysis for flow networks.
//!
//! The crate estimates the probability that a network (a power grid in the
//! shipped tooling) loses more than a threshold fraction of its served load
//! when components fail at random. The expensive part of that question is the
//! limit-state function: every candidate component-state vector has to be run
//! through a cascading-failure simulation built on linearized power flow and
//! optimal dispatch. The estimators in this crate trade those expensive calls
//! against statistical accuracy in different ways:
//!
//! * [`estimators::crude_mcs`] evaluates every Monte Carlo sample.
//! * [`estimators::subset_simulation`] chains conditional levels with a
//!   component-wise Metropolis sampler.
//! * [`active::run`] adaptively trains a Bayesian additive regression trees
//!   surrogate, spending limit-state calls only where the surrogate is
//!   uncertain or close to the failure boundary.
//! * [`estimators::passive_surrogate_run`] is the same surrogate trained on
//!   uniformly random batches, kept as a baseline.
//!
//! All of them implement [`strategy::FailureProbabilityEstimator`] and are
//! registered by name in [`strategy::registry`], which is how the `gridrel`
//! CLI selects them at runtime.
//!
//! Determinism is a hard requirement throughout: every random draw is keyed
//! by `(seed, role, indices)` through [`rng`], so results are reproducible
//! bit-for-bit regardless of thread count or evaluation order.

pub mod active;
pub mod bart;
pub mod cascade;
pub mod error;
pub mod estimators;
pub mod flow;
pub mod limitstate;
pub mod netmodel;
pub mod rng;
pub mod simplex;
pub mod strategy;

pub use error::{Error, Result};
