//! Error type shared by every pipeline stage.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scan range too small: z_max - z_min = {span} nm, need at least 2 * z_step = {min_span} nm")]
    RangeTooSmall { span: f64, min_span: f64 },

    #[error("particle {id} has non-finite coordinates")]
    NonFiniteCoordinates { id: u64 },

    #[error("particle {id}: detected run of {len} consecutive frames is shorter than 3")]
    FewerThanThreeFrames { id: u64, len: usize },

    #[error("brightness weights sum to {sum}, expected a positive total")]
    ZeroWeightSum { sum: f64 },

    #[error("least-squares fit failed to converge within {max_iters} iterations")]
    FitDiverged { max_iters: usize },

    #[error("delta {delta_nm} nm is not a positive integer multiple of z_step {z_step_nm} nm")]
    DeltaNotOnGrid { delta_nm: f64, z_step_nm: f64 },

    #[error("need at least {need} distinct particles, got {got}")]
    TooFewParticles { need: usize, got: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("dataset has no samples in the requested split")]
    EmptySplit,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward called without a cached train-mode forward pass")]
    NoCachedForward,

    #[error("non-finite loss at step {step} (epoch {epoch}); first non-finite activation in layer `{layer}`")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        layer: String,
    },

    #[error("{path}: bad magic bytes {got:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        got: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported format version {got}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        got: u32,
        expected: u32,
    },

    #[error("{path}: file truncated at byte {offset} while reading {reading}")]
    TruncatedFile {
        path: PathBuf,
        offset: u64,
        reading: &'static str,
    },

    #[error("{path}: checksum mismatch, stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: corrupt record: {what}")]
    CorruptRecord { path: PathBuf, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 success, 2 invalid config,
    /// 3 I/O or file-format failure, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidConfig(_) | RangeTooSmall { .. } | NonFiniteCoordinates { .. }
            | DeltaNotOnGrid { .. } | TooFewParticles { .. } | EmptySplit => 2,
            BadMagic { .. } | VersionMismatch { .. } | TruncatedFile { .. }
            | ChecksumMismatch { .. } | CorruptRecord { .. } | Io { .. } | Json { .. } => 3,
            FewerThanThreeFrames { .. } | ZeroWeightSum { .. } | FitDiverged { .. }
            | TooFewSamples { .. } | ShapeMismatch(_) | NoCachedForward
            | NonFiniteLoss { .. } => 4,
        }
    }
}
