use std::path::PathBuf;

use crate::geometry::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid frame window: {}", join_diagnostics(.0))]
    InvalidWindow(Vec<Diagnostic>),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("no supervision target for cluster {0}")]
    MissingTarget(u32),

    #[error("length mismatch in {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame {t} with history {h} is outside the scene (0..{frames})")]
    OutOfRange { t: i64, h: usize, frames: usize },

    #[error("optimization diverged at iteration {iteration} (loss {loss:e})")]
    Diverged {
        iteration: usize,
        loss: f64,
        trace: Box<crate::fit::FitTrace>,
    },

    #[error("malformed archive {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidWindow(_) => "invalid_window",
            Error::InvalidTransform(_) => "invalid_transform",
            Error::EmptyIndex => "empty_index",
            Error::MissingTarget(_) => "missing_target",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Config(_) => "config",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }

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

    pub(crate) fn length(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::LengthMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
