//! Ewald-Oseen scattering (EOS) solver for the 3D nonlinear Maxwell equations.
//!
//! The solver treats a single rectangular scatterer with a nonlinear current
//! response. Interior fields are advanced with an explicit Lax-Wendroff step
//! on the first-order Maxwell system plus a modified Euler step for the
//! current, while the boundary values of E and B are dynamical variables
//! updated each step from retarded boundary integral identities. No exterior
//! grid exists: the incident field enters through closed-form source terms
//! and the scattered exterior field is implicit in the integral identities.
//!
//! Module map:
//! - [`core_state`]: grid, surface mesh, field storage, time-history ring,
//!   rank-one boundary operator inverse.
//! - [`domain_stepper`]: non-uniform difference stencils, Lax-Wendroff and
//!   Heun substeps for the interior.
//! - [`boundary_kernels`]: retarded volume, incident and surface integrals,
//!   including singular self-panel quadrature.
//! - [`eos_solver`]: the coupled time loop and trace update.
//! - [`verification`]: artificial-source test, scalar wave-identity check,
//!   stability-window scan.
//! - [`cli_io`]: config parsing, output writers, CLI entry points.

pub mod boundary_kernels;
pub mod cli_io;
pub mod core_state;
pub mod domain_stepper;
pub mod eos_solver;
pub mod verification;

use thiserror::Error;

/// Unified error type for solver construction, evaluation and IO.
#[derive(Debug, Error)]
pub enum EosError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("history underrun: requested T={requested:.6e} but oldest stored level is {oldest:.6e}")]
    HistoryUnderrun { requested: f64, oldest: f64 },
    #[error("causality violation: requested T={requested:.6e} lies beyond reachable time {latest:.6e}")]
    Causality { requested: f64, latest: f64 },
    #[error("singular boundary operator: k = -1 makes I + k n n' non-invertible")]
    SingularOperator,
    #[error("singular source: evaluation point coincides with the point-source location")]
    SingularSource,
    #[error("missing boundary trace data at t={0:.6e}")]
    MissingBoundaryTrace(f64),
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),
    #[error("config semantic error for key `{key}`: {reason}")]
    ConfigSemantic { key: String, reason: String },
    #[error("material inconsistency: c^2*eps*mu = {value:.12} differs from 1 for region {region}")]
    MaterialInconsistency { region: usize, value: f64 },
    #[error("instability detected at step {step}: max field {max_field:.3e} exceeds threshold {threshold:.3e}")]
    Instability { step: usize, max_field: f64, threshold: f64 },
    #[error("target outside the integration domain")]
    DomainError,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, EosError>;
