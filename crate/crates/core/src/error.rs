use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the guard threshold")]
    NearZeroNorm { norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("query {query} has no candidate subset")]
    MissingSubset { query: usize },

    #[error("missing metric cell {category}/{metric}")]
    MissingCell { category: String, metric: String },

    #[error("unknown id {id:?}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    UnknownId { id: String, line: Option<usize> },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated file {path}: {detail}")]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("bad split {value:?} on line {line}")]
    BadSplit { value: String, line: usize },

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("split {0} has no records")]
    EmptySplit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error on line {line} of {path}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
