use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage, used to label errors raised inside [`crate::pipeline::register_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Downsample,
    Encode,
    Attention,
    Match,
    Ransac,
    Icp,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Downsample,
        Stage::Encode,
        Stage::Attention,
        Stage::Match,
        Stage::Ransac,
        Stage::Icp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Downsample => "downsample",
            Stage::Encode => "encode",
            Stage::Attention => "attention",
            Stage::Match => "match",
            Stage::Ransac => "ransac",
            Stage::Icp => "icp",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: need at least {needed}, got {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("no usable correspondences: {0}")]
    NoCorrespondences(String),

    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stage label if this error was raised inside the registration pipeline.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// True for errors caused by unreadable or malformed inputs (files, configs).
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
