use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: orthonormality deviation {deviation:.3e}, det {det:.9}")]
    InvalidRotation { deviation: f64, det: f64 },

    #[error("degenerate 6d rotation: {0}")]
    Degenerate6d(&'static str),

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("degenerate overlap{}: {reason}", chunk_suffix(*.chunk))]
    DegenerateOverlap { chunk: Option<usize>, reason: String },

    #[error("negative scale {scale}{}", chunk_suffix(*.chunk))]
    NegativeScale { chunk: Option<usize>, scale: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no character track available")]
    NoCharacter,

    #[error("malformed segments: {0}")]
    MalformedSegments(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("request timed out after {0:.1}s")]
    Timeout(f64),

    #[error("non-finite loss at step {step} (sigma {sigma:.4e})")]
    NanLoss { step: usize, sigma: f64 },

    #[error("non-finite clatr loss at step {step}: {breakdown}")]
    ClatrNanLoss { step: usize, breakdown: String },

    #[error("sampler diverged at step {step}")]
    SamplerDivergence { step: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn chunk_suffix(chunk: Option<usize>) -> String {
    chunk.map(|c| format!(" at chunk {c}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRotation { .. } => "invalid_rotation",
            Error::Degenerate6d(_) => "degenerate_6d",
            Error::Trajectory(_) => "trajectory",
            Error::DegenerateOverlap { .. } => "degenerate_overlap",
            Error::NegativeScale { .. } => "negative_scale",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NoCharacter => "no_character",
            Error::MalformedSegments(_) => "malformed_segments",
            Error::Transport(_) => "transport",
            Error::Timeout(_) => "timeout",
            Error::NanLoss { .. } | Error::ClatrNanLoss { .. } => "nan_loss",
            Error::SamplerDivergence { .. } => "sampler_divergence",
            Error::Input(_) => "input",
            Error::Format { .. } => "format",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Io { .. } => "io",
        }
    }
}
