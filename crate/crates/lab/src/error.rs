use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{}: file not found", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line} has {actual} field(s), expected {expected}", path.display())]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        actual: usize,
    },
    #[error("{}: line {line}, column {column}: {cell:?} is not a number", path.display())]
    NonNumeric {
        path: PathBuf,
        line: u64,
        column: usize,
        cell: String,
    },
    #[error("{}: fewer than 2 classes (found {found})", path.display())]
    TooFewClasses { path: PathBuf, found: usize },
    #[error("{}: malformed CSV: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: malformed JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    NoRuns(String),
    #[error(transparent)]
    Core(#[from] lecnet_core::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            LabError::MissingFile(path)
        } else {
            LabError::Io { path, source }
        }
    }
}
