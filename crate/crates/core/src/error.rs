use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A tensor file failed to parse; `field` names the header field or
    /// payload section that was bad.
    #[error("{}: malformed tensor file ({field}): {detail}", path.display())]
    Format {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("clip {clip_id}: inconsistent frame counts ({tracks})")]
    Consistency { clip_id: String, tracks: String },

    #[error("clip {clip_id}: missing track {track} ({})", path.display())]
    MissingTrack {
        clip_id: String,
        track: String,
        path: PathBuf,
    },

    #[error("missing checkpoint for {part} ({})", path.display())]
    MissingCheckpoint { part: String, path: PathBuf },

    #[error("shape error in {track}: {detail}")]
    Shape { track: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite loss in {stage} (epoch {epoch}, batch {batch}, clips [{clips}])")]
    NumericFailure {
        stage: String,
        epoch: usize,
        batch: usize,
        clips: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(track: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            track: track.into(),
            detail: detail.into(),
        }
    }
}
