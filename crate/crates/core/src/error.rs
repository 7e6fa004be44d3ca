use std::fmt;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What went wrong on one manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineErrorKind {
    Parse,
    Schema,
    Integrity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub kind: LineErrorKind,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LineErrorKind::Parse => "parse error",
            LineErrorKind::Schema => "schema error",
            LineErrorKind::Integrity => "integrity error",
        };
        write!(f, "line {}: {}: {}", self.line, kind, self.message)
    }
}

fn join_lines(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Every offending line of a JSONL file, in file order.
    #[error("invalid {file}: {}", join_lines(.errors))]
    Lines { file: String, errors: Vec<LineError> },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class `{0}` has no positive samples")]
    EmptyClass(String),

    #[error("non-finite loss value {0}")]
    NonFinite(f64),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Data errors (as opposed to configuration errors) map to a distinct CLI
    /// exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
