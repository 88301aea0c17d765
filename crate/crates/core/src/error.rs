//! Error type shared by all modules.
//!
//! Variants are grouped into configuration/validation problems (bad input
//! data, insufficient budgets) and numerical invariant violations (a solver
//! produced data that breaks a contract). The CLI maps the former to exit
//! code 2 and the latter to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Profile data rejected at construction (e.g. inf ε ≤ 0).
    #[error("invalid dielectric profile: {0}")]
    InvalidProfile(String),

    /// A coefficient table or basis is too small for the requested assembly.
    #[error("insufficient coefficient cutoff: {0}")]
    InsufficientCutoff(String),

    /// Bad solver/contour/grid parameters.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The ε₀ mass matrix failed to be positive definite.
    #[error("mass matrix not positive definite: {0}")]
    IndefiniteMass(String),

    /// A computed quantity violated a stated numerical invariant.
    #[error("numerical invariant violated: {0}")]
    InvariantViolation(String),

    /// Band matching found two overlaps too close to call.
    #[error("ambiguous band matching: {0}; refine the k-grid")]
    AmbiguousMatching(String),

    /// Touch-point polynomial fit failed its residual threshold.
    #[error("band-edge fit residual too large: {0}; increase J or N")]
    FitResidual(String),

    /// Newton iteration failed to converge.
    #[error("newton iteration did not converge: {0}")]
    NewtonDiverged(String),

    /// λ requested outside the admissible set (inside a band, outside the gap, at a pole).
    #[error("spectral parameter rejected: {0}")]
    BadSpectralParameter(String),

    /// Defect sign assumptions violated.
    #[error("defect sign not admissible: {0}")]
    DefectSign(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for input/validation-type errors (CLI exit code 2); false for
    /// numerical invariant violations (exit code 3).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidProfile(_)
                | Error::InsufficientCutoff(_)
                | Error::InvalidConfig(_)
                | Error::BadSpectralParameter(_)
                | Error::DefectSign(_)
                | Error::Io(_)
        )
    }
}
