use std::io;

use thiserror::Error;

/// Position and time at which a simulated particle left its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeReport {
    pub time: f64,
    pub step: usize,
    pub position: [f64; 3],
    pub bound: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("particle escaped at t = {:.6e} s (|r| = {:.3e} m > bound {:.3e} m)", .0.time, norm(&.0.position), .0.bound)]
    Escaped(EscapeReport),

    #[error(
        "integration unstable at step {step}: displacement {displacement:.3e} m exceeds domain scale {scale:.3e} m"
    )]
    Unstable { step: usize, displacement: f64, scale: f64 },

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("design matrix is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("histograms do not share bin edges")]
    GridMismatch,

    #[error("extremum search failed: {0}")]
    SearchFailed(String),

    #[error("grid too large: {requested} values exceeds cap of {cap}")]
    GridTooLarge { requested: usize, cap: usize },

    #[error("density is not normalizable on the grid: {0}")]
    NotNormalizable(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}

pub(crate) fn ensure(cond: bool, name: &'static str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(invalid(name, reason))
    }
}
