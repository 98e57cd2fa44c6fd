//! Error type shared across the crate.

use thiserror::Error;

/// Failure modes of model construction, design, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// A system description is structurally invalid (dimension mismatch,
    /// non-symmetric or indefinite covariance, unstabilizable pair, ...).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A fixed-point iteration failed to converge within its iteration cap.
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A cost iteration diverged: the packet-drop process is too lossy for
    /// any linear feedback to keep the expected LQG cost finite.
    #[error("unbounded LQG cost: {0}")]
    UnboundedCost(String),

    /// A linear solve or factorization hit a (numerically) singular matrix.
    #[error("singular matrix in {0}")]
    Singular(String),

    /// A cost quadratic form expected to be positive definite was not, so
    /// a budget-constrained maximization is ill-posed at that point.
    #[error("cost form is not positive definite: {0}")]
    NonPositiveCostForm(String),

    /// A design problem has no feasible point (budget below the no-watermark
    /// cost, or every candidate fails a stability certificate).
    #[error("infeasible design: {0}")]
    Infeasible(String),

    /// A configuration file is self-inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),
}
