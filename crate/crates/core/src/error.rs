use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Write {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error on {}{}: {source}", path.display(), role.as_ref().map(|r| format!(" (role {r})")).unwrap_or_default())]
    Io {
        path: PathBuf,
        role: Option<String>,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} payload bytes, found {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, role: Option<&str>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            role: role.map(str::to_owned),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 = usage or contract violation, 3 = i/o or malformed file, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Write { .. } | Error::Io { .. } | Error::Format(_) | Error::Length { .. } => 3,
            Error::Training { .. } => 4,
            Error::Consistency(_)
            | Error::Contract(_)
            | Error::Fit(_)
            | Error::Construction(_)
            | Error::Generation(_) => 2,
        }
    }
}
