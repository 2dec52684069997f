//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volumes are defined on different grids")]
    GridMismatch,
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("channel count {k} exceeds the enumeration bound {max}")]
    KTooLarge { k: usize, max: usize },
    #[error("{found} live segments exceed the {max} object channels")]
    TooManyObjects { found: usize, max: usize },
    #[error("failed to place {n} objects without overlap after {attempts} attempts")]
    PlacementFailure { n: usize, attempts: usize },
    #[error("push start cell ({px}, {py}) is outside the {nx}x{ny} action grid")]
    ActionOutOfGrid { px: u32, py: u32, nx: usize, ny: usize },
    #[error("state has no nonempty object channel")]
    NoObjects,
    #[error("no voxel selected for the requested metric region")]
    EmptyRegion,
    #[error("scene flow contains non-finite components")]
    NonFiniteFlow,
    #[error("the last transform must be the identity (static background)")]
    NonIdentityBackground,
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
    #[error("unsupported schema version {got} (expected {expected})")]
    SchemaVersion { got: u32, expected: u32 },
    #[error("malformed {what}: {why}")]
    Format { what: &'static str, why: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
