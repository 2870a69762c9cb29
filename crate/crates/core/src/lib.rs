//! Generalized meta federated learning.
//!
//! The objective trained here is the average client loss measured *after*
//! `nu` local gradient fine-tuning steps. The crate provides:
//!
//! * [`nn`]: a tanh MLP with softmax cross-entropy and a quadratic test model,
//!   both with exact gradients and exact Hessian-vector products.
//! * [`data`]: synthetic and CIFAR datasets, Dirichlet client partitioning,
//!   seeded batch sampling.
//! * [`metagrad`]: the exact, first-order and Hessian-free local-update
//!   engines plus a deterministic full-batch meta-gradient oracle.
//! * [`fedsim`]: the server loop (client sampling, local updates,
//!   aggregation) and post-fine-tuning evaluation.
//! * [`theory`]: executable bound formulas (smoothness, bias/variance,
//!   similarity, stationarity) and empirical estimators for their constants.

pub mod data;
pub mod error;
pub mod fedsim;
pub mod linalg;
pub mod metagrad;
pub mod nn;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
