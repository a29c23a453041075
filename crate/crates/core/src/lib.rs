//! Perturbed prox-preconditioned SPIDER for composite finite-sum problems
//! whose per-sample fields are only available through Monte Carlo.
//!
//! The engine is [`spider::run_3p_spider`]; [`logistic`] provides the latent
//! logistic regression oracle and [`baselines`] the online and full-batch
//! comparators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod logistic;
pub mod oracle;
pub mod prox;
pub mod quadrature;
pub mod rng;
pub mod spider;

pub use error::{Error, Result};
pub use oracle::{GradientOracle, LipschitzData};
pub use prox::{Matrix, Preconditioner, Regularizer, Vector};
pub use spider::{run_3p_spider, RunConfig, StepSize, Trajectory};
