use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown machine type(s) not present in catalog: {}", .0.join(", "))]
    UnknownMachineTypes(Vec<String>),

    #[error("memory counters unavailable: {0}")]
    MemoryCounters(String),

    #[error("failed to spawn job `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("profiling failed: {0}")]
    Profiling(String),

    #[error("degenerate regression input: {0}")]
    Degenerate(String),

    #[error("memory model is not linear (r2 = {r2}); use a zero requirement instead")]
    NonLinearModel { r2: f64 },

    #[error("history is empty after filtering: {0}")]
    EmptyHistory(String),

    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
