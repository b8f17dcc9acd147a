//! Deterministic federated-learning simulator for binary neural networks.
//!
//! The crate is organised in layers:
//! - [`binary_net`]: binary-weight networks with manual backpropagation.
//! - [`mlpu`]: the maximum-likelihood estimator that turns an aggregated
//!   binary vote and a local auxiliary weight into an updated weight.
//! - [`data`]: IDX ingestion, synthetic data and client partitions.
//! - [`federation`]: the round engine for all exchange strategies, with
//!   bit-exact communication accounting.
//! - [`convergence_lab`]: numerical checks of the convergence conditions
//!   on convex quadratic problems.
//! - [`experiment`]: declarative run configs and reproducible artifacts.

pub mod binary_net;
pub mod convergence_lab;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod mlpu;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;
