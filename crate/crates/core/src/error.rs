use thiserror::Error;

use crate::dfc::PiTrace;
use crate::mfpi::{EpochTrace, PiIterate};

pub type Result<T> = std::result::Result<T, DfcError>;

#[derive(Debug, Error)]
pub enum DfcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix {what} is singular (smallest singular value {sigma_min:.3e}, threshold {threshold:.3e})")]
    Singular {
        what: &'static str,
        sigma_min: f64,
        threshold: f64,
    },

    #[error("algebraic loop unsolvable: (I + B K) is singular")]
    AlgebraicLoop,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("magnet collision: force-law denominator {which} = {value:.3e}")]
    MagnetCollision { which: &'static str, value: f64 },

    #[error("simulation diverged at sample {index} (t = {time:.4} s)")]
    Divergence { index: usize, time: f64 },

    #[error("matrix is not Hurwitz: {0}")]
    NotHurwitz(String),

    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,

    #[error("pair (Q^1/2, A) is not observable")]
    NotObservable,

    #[error("model-based policy iteration did not converge in {} iterations", trace.steps.len())]
    PiNotConverged { trace: Box<PiTrace> },

    #[error("Lyapunov solve failed at iteration {iteration}: {reason}")]
    LyapunovFailure { iteration: usize, reason: String },

    #[error("insufficient excitation: data matrix rank deficient (singular values {singular_values:?})")]
    InsufficientExcitation { singular_values: Vec<f64> },

    #[error("model-free policy iteration did not converge in {} iterations", iterates.len())]
    InnerPiNotConverged { iterates: Vec<PiIterate> },

    #[error("training aborted in epoch {epoch}: {reason}")]
    EpochAborted {
        epoch: usize,
        reason: String,
        trace: Box<EpochTrace>,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DfcError {
    /// True for failures caused by data that does not excite the plant enough
    /// to identify the unknowns.
    pub fn is_insufficient_excitation(&self) -> bool {
        match self {
            DfcError::InsufficientExcitation { .. } => true,
            DfcError::EpochAborted { reason, .. } => reason.starts_with("insufficient excitation"),
            _ => false,
        }
    }
}
