use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e} voxels)")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("field is not invertible: max Jacobian perturbation norm {max_norm:.3} >= 1 at voxel {voxel:?}")]
    NotInvertible { max_norm: f64, voxel: [usize; 3] },

    #[error("non-finite gradient in parameter `{name}` (max |g| = {max_abs})")]
    NonFiniteGradient { name: String, max_abs: f64 },

    #[error("ground-truth check failed: {0}")]
    GroundTruth(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("format mismatch: {0}")]
    FormatMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("not initialized: {0}")]
    NotInitialized(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure classes, mapped to process exit codes by the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Numeric,
    Data,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Io => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Data => 5,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => ErrorClass::Usage,
            Error::Io(_) => ErrorClass::Io,
            Error::NonConvergence { .. }
            | Error::NotInvertible { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss(_)
            | Error::GroundTruth(_)
            | Error::GradCheck(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

/// Attach the offending path to an I/O failure.
pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
