use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid filter spec: {0}")]
    InvalidFilter(String),

    #[error("designed filter is unstable (pole radius {radius})")]
    UnstableFilter { radius: f64 },

    #[error("invalid STFT parameters: {0}")]
    InvalidStft(String),

    #[error("invalid sample rate {0} Hz")]
    InvalidSampleRate(u32),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    RateMismatch { expected: u32, got: u32 },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {0} outside the valid range")]
    InvalidTime(f64),

    #[error("non-finite value encountered at {0}")]
    NonFinite(String),

    #[error("latent has zero variance; cannot fit a scale")]
    ZeroVariance,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
