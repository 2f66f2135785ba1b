use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single offending line found while ingesting a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("request {request_id}: {what} not found in catalog")]
    NotFound { request_id: u64, what: String },

    #[error("event scheduled in the past (t={time} < clock={clock})")]
    PastEvent { time: f64, clock: f64 },

    #[error("watchdog tripped after {events} events; last events:\n{tail}")]
    Watchdog { events: u64, tail: String },

    #[error("malformed trace {}: {}", path.display(), join_lines(.errors))]
    TraceParse {
        path: PathBuf,
        errors: Vec<LineError>,
    },

    #[error("no zipf exponent in [{lo}, {hi}] reaches mass {target} (achievable {min_mass}..{max_mass})")]
    Infeasible {
        lo: f64,
        hi: f64,
        target: f64,
        min_mass: f64,
        max_mass: f64,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_lines(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Simulation,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Simulation => 3,
            ErrorCategory::Io => 4,
        }
    }
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Validation(_)
            | Error::Config { .. }
            | Error::TraceParse { .. }
            | Error::Infeasible { .. }
            | Error::Json(_) => ErrorCategory::Config,
            Error::NotFound { .. } | Error::PastEvent { .. } | Error::Watchdog { .. } => {
                ErrorCategory::Simulation
            }
            Error::Io { .. } => ErrorCategory::Io,
        }
    }
}
