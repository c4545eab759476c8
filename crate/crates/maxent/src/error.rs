//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors produced by construction, fitting and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad support parameters, bad basis definition,
    /// inconsistent dimensions in a config document.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input: empty sample, sample values outside the
    /// support, mismatched grids or bases.
    #[error("input error: {0}")]
    Input(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("numeric error: {message}{}", node.map(|x| format!(" at node x = {x}")).unwrap_or_default())]
    Numeric {
        message: String,
        /// Quadrature node at which the failure occurred, when known.
        node: Option<f64>,
    },

    /// The moment vector admits no maxent density, either because a
    /// necessary feasibility screen failed or because the dual iterates
    /// diverged (the gradient cannot vanish).
    #[error("infeasible moment vector: {reason}")]
    Infeasible { reason: String },

    /// The Newton iteration did not reach the gradient tolerance.
    #[error("solver did not converge in {iterations} iterations (grad norm {grad_norm:.3e})")]
    NonConvergence { grad_norm: f64, iterations: usize },

    /// The Hessian / covariance matrix is numerically singular.
    #[error("ill-conditioned covariance matrix (min eigenvalue {min_eig:.3e}, max {max_eig:.3e}): {hint}")]
    Conditioning {
        min_eig: f64,
        max_eig: f64,
        hint: String,
    },

    /// Kullback divergence requested between densities with incompatible
    /// supports (f > 0 where g = 0).
    #[error("support mismatch: f > 0 where g = 0 at node x = {node}")]
    SupportMismatch { node: f64 },

    /// Rejection sampler acceptance rate fell below the safety floor.
    #[error("rejection sampling envelope is too loose: acceptance rate {rate:.3e} after {proposals} proposals")]
    Envelope { rate: f64, proposals: u64 },

    /// File I/O failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            node: None,
        }
    }

    pub(crate) fn numeric_at(message: impl Into<String>, node: f64) -> Self {
        Error::Numeric {
            message: message.into(),
            node: Some(node),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
