//! Crate-wide error type.

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the estimation, control, and benchmarking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent matrix/vector dimensions or invalid structural arguments.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A data window extends past the end of the available log.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// The requested horizon makes the future Hankel partition rank-deficient.
    #[error("horizon too long: {0}")]
    HorizonTooLong(String),

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    /// The regressor Gram matrix is numerically singular.
    #[error("singular Gram matrix: {0}")]
    SingularGram(String),

    /// A prior covariance matrix is not symmetric positive definite.
    #[error("prior covariance is not positive definite: {0}")]
    NonPsdPrior(String),

    /// A triangular LQ factor required for inversion is singular.
    #[error("singular LQ factor: {0}")]
    SingularFactor(String),

    /// Too few samples relative to the parameter count for a variance estimate.
    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    /// Constraints admit no feasible point.
    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    /// The QP active-set iteration cap was exhausted.
    #[error("QP iteration limit exceeded: {0}")]
    MaxIterations(String),

    /// The plant's steady-state observer dynamics are unstable.
    #[error("unstable observer: spectral radius of A - K*C is {radius}")]
    UnstableObserver { radius: f64 },

    /// Trajectory logs of mismatched length.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// Every candidate in a tuning grid produced an unstable closed loop.
    #[error("all grid points unstable: {0}")]
    AllPointsUnstable(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A controller failed inside a closed-loop run; the run context is attached.
    #[error("controller failure ({context}): {source}")]
    Controller {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with closed-loop run context (scheme name, step index).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Controller { context: context.into(), source: Box::new(self) }
    }
}
