// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the workbench.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the numerics kernel, the model, the data generators,
/// the patching engine and the analysis layer.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite activation at {0}")]
    NonFiniteActivation(String),

    #[error("site out of range: {0}")]
    SiteOutOfRange(String),

    #[error("donor trace shape mismatch: {0}")]
    TraceShapeMismatch(String),

    #[error("config too small: {0}")]
    ConfigTooSmall(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("attribute vocabulary exhausted: {0}")]
    VocabExhausted(String),

    #[error("no eligible donor pair for sample {0}")]
    NoCandidate(usize),

    #[error("negative noise sigma {0}")]
    NegativeSigma(f64),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown metric `{0}`")]
    MetricUnknown(String),

    #[error("degenerate standard deviation in setting `{0}`: all heads equal")]
    DegenerateStd(String),

    #[error("head universe mismatch: {0}")]
    UniverseMismatch(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used by the command-line front end to pick an
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Self::InvalidConfig(_)
            | Self::ConfigTooSmall(_)
            | Self::MetricUnknown(_)
            | Self::SiteOutOfRange(_)
            | Self::NegativeSigma(_) => ErrorClass::Config,
            Self::NonFiniteInput(_) | Self::NonFiniteActivation(_) | Self::DegenerateStd(_) => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }
}
