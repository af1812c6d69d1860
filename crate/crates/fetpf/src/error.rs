//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the filtering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("need at least {required} ensemble members, got {actual}")]
    TooFewMembers { required: usize, actual: usize },

    #[error("propagation requires at least one substep")]
    ZeroSubsteps,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("state or weight contains a non-finite value")]
    NonFiniteState,

    #[error("all posterior weights vanished; filter diverged")]
    WeightUnderflow,

    #[error("dynamic ensemble covariance is exactly zero; filter diverged")]
    DegenerateEnsemble,

    #[error("empty sequence")]
    EmptySequence,

    #[error("unbalanced marginals: total supply {supply} vs total demand {demand}")]
    UnbalancedMarginals { supply: f64, demand: f64 },

    #[error("negative marginal at index {index}: {value}")]
    NegativeMarginal { index: usize, value: f64 },

    #[error("transport cost matrix contains a non-finite entry")]
    NonFiniteCost,

    #[error("transportation simplex exceeded its pivot budget")]
    TransportNoConvergence,

    #[error("transport plan column {index} sums to {value}, expected 1")]
    ColumnMarginal { index: usize, value: f64 },

    #[error("second-order correction failed: {0}")]
    Correction(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix trace must be positive, got {0}")]
    NonPositiveTrace(f64),

    #[error("no shrinkage targets supplied")]
    NoTargets,

    #[error("k-means needs at least k samples: k={k}, samples={samples}")]
    TooFewSamples { k: usize, samples: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// True for failure modes that mean the filter lost track of the state
    /// rather than the caller misusing the API. The experiment harness maps
    /// these to an infinite-RMSE sentinel instead of aborting.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::WeightUnderflow
                | Error::DegenerateEnsemble
                | Error::NonFiniteState
                | Error::NotPositiveDefinite
                | Error::Correction(_)
        )
    }

    /// CLI exit code class: 1 = configuration, 2 = runtime, 3 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
