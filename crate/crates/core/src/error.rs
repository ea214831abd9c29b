use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("star rating must be in 1..=5, got {0}")]
    InvalidStar(i64),

    #[error("unknown safety label {0:?} (expected safe or high_risk)")]
    InvalidLabel(String),

    #[error("segment {id}: label {label:?} contradicts star rating {star}")]
    LabelMismatch { id: String, star: u8, label: String },

    #[error("missing input {}", path.display())]
    MissingInput { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unroutable origin ({lat}, {lon})")]
    UnroutableOrigin { lat: f64, lon: f64 },

    #[error("column {0:?} has no observed values")]
    AllMissingColumn(String),

    #[error("nothing to oversample: {0}")]
    NothingToOversample(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput { path }
        } else {
            Error::Io { path, source }
        }
    }
}
