//! Subspace predictive control from input/output data: simulation of LTI
//! systems, Hankel construction, predictor estimation, bias analysis and
//! the predictive controllers built on top of them.

pub mod bias_analysis;
pub mod controllers;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod hankel;
pub mod linalg;
pub mod lti_sim;

pub use error::{Error, Result};
