use std::fmt;
use std::io;
use std::path::PathBuf;

/// Errors of the file formats, reports and command driver.
#[derive(Debug)]
pub enum Error {
    /// A file could not be read or written.
    Io { path: PathBuf, source: io::Error },
    /// Config text is malformed; `line` is 1-based.
    Parse { line: usize, msg: String },
    /// The model, planner or simulator rejected the input.
    Model(hyvit_core::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Parse { line, msg } => write!(f, "line {line}: {msg}"),
            Error::Model(e) => write!(f, "{e}"),
            Error::Json(e) => write!(f, "json: {e}"),
            Error::Csv(e) => write!(f, "csv: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Model(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::Csv(e) => Some(e),
            Error::Parse { .. } => None,
        }
    }
}

impl From<hyvit_core::Error> for Error {
    fn from(e: hyvit_core::Error) -> Self {
        Error::Model(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
