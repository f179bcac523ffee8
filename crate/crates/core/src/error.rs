use thiserror::Error;

use crate::polyring::Monomial;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("moment sequence has no value for exponent {0}")]
    MissingMoment(Monomial),

    #[error("polynomial degree {degree} exceeds available moment degree {available}")]
    DegreeOverflow { degree: u32, available: u32 },

    #[error("constraint has no nonzero coefficient")]
    EmptyConstraint,

    #[error("constraint references exponent {0} outside the unknown set")]
    UnknownExponent(Monomial),

    #[error("linear system is underdetermined ({rank} of {unknowns} unknowns pinned)")]
    Underdetermined { rank: usize, unknowns: usize },

    #[error("linear system is inconsistent (least-squares residual {residual:.3e})")]
    Inconsistent { residual: f64 },

    #[error("pivot block is singular (rank {rank}, need {needed})")]
    SingularBlock { rank: usize, needed: usize },

    #[error("numeric rank {rank} is smaller than requested {requested}")]
    RankTooSmall { rank: usize, requested: usize },

    #[error("no admissible row basis: {0}")]
    NoRowBasis(String),

    #[error("extraction failed: {0}")]
    Extraction(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing data-side moment for exponent {0}")]
    MissingDataMoment(Monomial),

    #[error("empty data")]
    EmptyData,

    #[error("component count mismatch: estimate has {estimate}, truth has {truth}")]
    ComponentMismatch { estimate: usize, truth: usize },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),
}
