//! Multi-agent reinforcement learning for cluster resource allocation.
//!
//! A trace of machine and task events drives a discrete-time simulator
//! ([`sim`]). Heterogeneous agents ([`agents`]) act on partial observations,
//! are trained by a centralized critic ([`marl`]) over small MLPs
//! ([`policy`]) and are scored by the functions in [`metrics`].

pub mod agents;
pub mod experiment;
pub mod marl;
pub mod metrics;
pub mod policy;
pub mod sim;
pub mod trace;
