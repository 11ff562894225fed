//! Recovery of lost temporal order in ensembles of linear SDE trajectories.
//!
//! The crate simulates `dX = AX dt + G dW` ensembles, shuffles their time
//! axis, and reconstructs the order with the pairwise drift–score sorting
//! procedure in [`retrace`] or the graph baselines in [`baselines`]; drift
//! and diffusion are then estimated with the closed-form estimators in
//! [`estimators`]. [`pkpd`] carries the stochastic tumor-growth
//! counterfactual benchmark.

pub mod baselines;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod metrics;
pub mod pkpd;
pub mod retrace;
pub mod rng;
pub mod score;
pub mod simulator;

pub use error::{Error, Result};
pub use linalg::{Mat, SymMat, Vector};
pub use rng::RngSeed;
