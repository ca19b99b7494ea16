//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the forward model, sensitivities, and drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// A phase-density vector violated the simplex constraints (negative
    /// entry or partition-of-unity off by more than the tolerance).
    #[error("invalid design densities: {0}")]
    InvalidDesign(String),

    /// A material parameter or state left its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The swelling-equilibrium residual had no root bracket: the residual is
    /// negative at the lower end of the search interval, which only happens
    /// for unphysical parameter combinations.
    #[error(
        "no root bracket for swelling equilibrium (J2D = {j2d:.6e}, G = {g:.6e}, chi = {chi:.4}, \
         mu = {mu:.6e}): residual at phi = {phi_lo:.1e} is {f_lo:.6e}"
    )]
    BracketFailure {
        j2d: f64,
        g: f64,
        chi: f64,
        mu: f64,
        phi_lo: f64,
        f_lo: f64,
    },

    /// An element mapping or deformation gradient lost positivity where that
    /// is not recoverable (mesh construction, converged-state evaluation).
    #[error("non-positive Jacobian in element {element}: det = {det:.6e}")]
    InvertedElement { element: usize, det: f64 },

    /// The implicit-function derivative of the swelling root is undefined
    /// because the residual is stationary in phi.
    #[error("singular swelling equilibrium: |dF/dphi| = {f_phi_abs:.3e} below floor at phi = {phi:.6}, J2D = {j2d:.6e}")]
    SingularEquilibrium { phi: f64, j2d: f64, f_phi_abs: f64 },

    /// Newton failed to reach tolerance inside a load step (after retries).
    #[error(
        "Newton did not converge: load step {step}, {iters} iterations, residual {residual:.6e} \
         (tolerance {tol:.6e})"
    )]
    NonConvergence {
        step: usize,
        iters: usize,
        residual: f64,
        tol: f64,
    },

    /// The adjoint linear solve failed or its residual certificate was not met.
    #[error("adjoint solve failed: {0}")]
    AdjointFailure(String),

    /// Sparse factorization failed (structurally or numerically singular K).
    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    /// One or more configuration violations, collected before rejecting.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Snapshot or artifact parsing failure.
    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidDesign(_) | Error::Domain(_) => 2,
            Error::NonConvergence { .. }
            | Error::BracketFailure { .. }
            | Error::InvertedElement { .. }
            | Error::LinearSolver(_) => 3,
            Error::AdjointFailure(_) | Error::SingularEquilibrium { .. } => 4,
            Error::Io(_) | Error::Parse { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
