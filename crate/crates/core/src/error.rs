use std::path::PathBuf;

use thiserror::Error;

/// Broad failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid date {0:?}: expected YYYY-MM-DD")]
    InvalidDate(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),

    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: header is missing column(s) {missing:?}")]
    Header { path: PathBuf, missing: Vec<String> },

    #[error("store {0} has no station")]
    UnknownStore(u32),

    #[error("no weather row for station {station} on {date}")]
    MissingWeather { station: u32, date: String },

    #[error("duplicate {what} key {key}")]
    Duplicate { what: &'static str, key: String },

    #[error("weather column(s) missing at every station: {0:?}")]
    ColumnAllMissing(Vec<String>),

    #[error("invalid table: {0}")]
    Table(String),

    #[error("schema mismatch: missing column(s) {missing:?}")]
    SchemaMismatch { missing: Vec<String> },

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("series rows are not strictly ordered by date: {0}")]
    UnorderedSeries(String),

    #[error("rank-deficient design; collinear column(s) {0:?}")]
    RankDeficient(Vec<String>),

    #[error("training diverged at epoch {epoch}: loss {loss} (learning rate too high?)")]
    Divergence { epoch: usize, loss: f64 },

    #[error("{0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidSplit(_) | Error::Config(_) => ErrorKind::Config,
            Error::Divergence { .. } | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
