#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Equation discovery from short time series: evolutionary sparse
//! regression, a term ensemble with a Bayesian network over it, sampled
//! system solutions, and a bootstrapped thresholded-least-squares baseline.

pub mod baseline;
pub mod bayesnet;
pub mod compare;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod evolution;
pub mod parallel;
pub mod regression;
pub mod solver;
pub mod tokens;

pub use error::{Error, Result};
