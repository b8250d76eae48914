//! Error type shared by the whole engine.

use thiserror::Error;

/// All fallible engine operations return this error.
#[derive(Debug, Error)]
pub enum EngineError {
    /// A caller violated a documented precondition (shape mismatch,
    /// out-of-range parameter, off-grid window, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or derived runtime configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Exhaustive control enumeration would exceed its cap.
    #[error("lattice too large: {required} scenarios exceed the limit {limit}")]
    LatticeTooLarge { required: usize, limit: usize },

    /// The Picard iteration diverged; the report captures every iterate
    /// distance observed before the abort.
    #[error(
        "Picard iteration diverged after {iterations} iterations \
         (last H2 distance {last_distance:.6e})"
    )]
    Diverged {
        iterations: usize,
        last_distance: f64,
        report: Box<crate::solver::PicardReport>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

impl EngineError {
    /// Process exit code for the CLI: usage/config errors exit 1,
    /// violated runtime checks exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::Io(_) => 1,
            _ => 2,
        }
    }
}
