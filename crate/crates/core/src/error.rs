use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("group {artist}/{provenance} has no records to split")]
    EmptyGroup { artist: String, provenance: String },

    #[error("artist {artist} has {available} non-excluded {provenance} records, quota is {quota} (short by {})", quota - available)]
    QuotaUnmet {
        artist: String,
        provenance: String,
        available: usize,
        quota: usize,
    },

    #[error("cannot sample pairs: {0}")]
    PairSampling(String),

    #[error("could not decode image for {record}: {reason}")]
    Decode { record: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),

    #[error("negative distance {0}")]
    NegativeDistance(f64),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown record id {0}")]
    UnknownRecord(String),

    #[error("unknown artist {0}")]
    UnknownArtist(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("weights archive: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
