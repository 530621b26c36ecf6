use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid hyperparameter: {0}")]
    Hyper(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("no records in manifest {0}")]
    EmptyManifest(PathBuf),

    #[error("degenerate quad: {0}")]
    DegenerateQuad(String),

    #[error("split: {0}")]
    Split(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    Invalid(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} (seed {seed}): {source}")]
    Stage {
        stage: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str, seed: u64) -> Self {
        Error::Stage {
            stage: stage.into(),
            seed,
            source: Box::new(self),
        }
    }
}
