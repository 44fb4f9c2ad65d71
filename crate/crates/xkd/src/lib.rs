//! Experiential knowledge distillation for toy autoregressive policies.
//!
//! A tabular teacher and a small differentiable student play out the full
//! objective family — sequence-level, supervised, and generalized
//! distillation, each with an optional experiential regularizer built from a
//! Gaussian reward posterior, inverse-Boltzmann Q-values, and TD errors.
//! Everything is sized so that exact enumeration is feasible: every sampled
//! expectation has an exact counterpart, every analytic gradient a
//! finite-difference check, and the loss-reformulation identities are
//! executable assertions rather than comments.
//!
//! Batch evaluation, enumeration, Monte-Carlo estimation and sweeps fan out
//! over rayon when the default `parallel` feature is enabled; reductions are
//! fixed-order, so results are identical across worker counts and to the
//! sequential fallback.

pub mod checkpoint;
pub mod config;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod oracle;
pub mod parallel;
pub mod policy;
pub mod qvalue;
pub mod reward;
pub mod seq;
pub mod sweeps;
pub mod trainer;

pub use error::{Error, Result};
