use alloc::string::String;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate weights")]
    DegenerateWeights,
    #[error("geodesic undefined: antipodal orientations")]
    GeodesicUndefined,
    #[error("degenerate orientation: coincident positions")]
    DegenerateOrientation,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown frame `{0}`")]
    MissingFrame(String),
    #[error("diverged: non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite state during integration")]
    NonFiniteState,
    #[error("training diverged at epoch {epoch}")]
    TrainDiverged { epoch: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    CheckpointVersion { expected: u32, got: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
