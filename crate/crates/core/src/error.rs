use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("softmax over an empty support (every entry masked)")]
    EmptySupport,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("insufficient events: need {needed} distinct uncensored times, found {found}")]
    InsufficientEvents { needed: usize, found: usize },

    #[error("label {label} out of range for {n_bins} bins")]
    Label { label: usize, n_bins: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate censoring weights: {0}")]
    DegenerateWeights(String),

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("degenerate risk split: {0}")]
    DegenerateSplit(String),

    #[error("no prediction head for task {0}")]
    MissingHead(usize),

    #[error("no router for task {0}")]
    UnknownTask(usize),

    #[error("task {0} is already registered")]
    DuplicateTask(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{}: corrupt header: {detail}", path.display())]
    CorruptHeader { path: PathBuf, detail: String },

    #[error("{}: field `{field}`: {detail}", path.display())]
    FileField {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::UndefinedMetric(_)
            | Error::DegenerateWeights(_)
            | Error::UndefinedTest(_)
            | Error::DegenerateSplit(_) => 3,
            _ => 2,
        }
    }
}
