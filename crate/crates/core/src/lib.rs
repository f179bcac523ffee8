//! Mixture-model parameter estimation by the method of moments over parameter
//! polynomials.
//!
//! Observed data moments are written as mixtures of polynomials in the
//! component parameters. The unknown parameter moments are collected in a
//! truncated moment matrix, completed either by plain linear algebra or by a
//! trace-minimizing semidefinite relaxation, certified by a flat-extension
//! rank test, and finally factored into component parameters with a
//! shift-structured eigenproblem.

pub mod completion;
pub mod error;
pub mod extraction;
pub mod linalg;
pub mod models;
pub mod momentmat;
pub mod pipeline;
pub mod polyring;

pub use error::{Error, Result};
