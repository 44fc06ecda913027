//! Gaussian-process model predictive control for a PEM fuel cell stack.
//!
//! The crate bundles a semi-empirical stack simulator ([`plant`]), exact GP
//! regression ([`gp`]), the data collection and hyperparameter pipeline
//! ([`training`]), a dense QP solver ([`qp`]), the receding-horizon controller
//! ([`mpc`]), a closed-loop experiment runner ([`sim`]) and the command-line
//! front end ([`cli`]) driven by a [`config`] file.

// NaN-rejecting `!(x > 0.0)` checks are intended; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod error;
pub mod gp;
pub mod lbfgs;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
