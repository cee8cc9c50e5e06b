use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("unsupported mask file version {0}")]
    Version(u64),

    #[error("invalid sparsity {0}: expected 0 <= sparsity < 1")]
    InvalidSparsity(f64),

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    #[error("invalid recovery ratio {0}: expected 0 <= rr <= 1")]
    InvalidRatio(f64),

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite weight in layer {layer} at index {index}")]
    NonFiniteWeight { layer: usize, index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("revival plan does not match mask: {0}")]
    PlanMismatch(String),

    #[error("index {index} in layer {layer} is already alive")]
    AlreadyAlive { layer: usize, index: usize },

    #[error("output {0} already exists")]
    OutputExists(std::path::PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The caller supplied an out-of-range argument.
    Usage,
    /// Input data was missing, malformed or inconsistent.
    Data,
    /// A numeric computation failed.
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidSparsity(_)
            | Error::InvalidRatio(_)
            | Error::InvalidCounts(_)
            | Error::Infeasible(_) => ErrorClass::Usage,
            Error::NonFiniteWeight { .. } | Error::NonFinite(_) | Error::Diverged { .. } => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }
}
