use std::path::PathBuf;

/// Errors raised by the avatar library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Params(String),

    #[error("degenerate face {face}")]
    DegenerateFace { face: usize },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite gradient in parameter group `{group}` at step {step}")]
    NonFiniteGradient { group: String, step: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { step: u64, loss: f64, initial: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("correspondence error: source region has {src} faces, destination has {dst}")]
    Correspondence { src: usize, dst: usize },

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Reasons a checkpoint file is rejected on load.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"GMA1\"")]
    BadMagic,
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the input was at fault rather than the numerics or the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::DegenerateFace { .. }
                | Error::Topology(_)
                | Error::Shape(_)
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Diverged { .. }
        )
    }
}
