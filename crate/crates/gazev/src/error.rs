use std::path::PathBuf;

/// Errors surfaced by the conversion toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("no speakers found under {0}")]
    EmptyCorpus(PathBuf),

    #[error("missing gender entry for speaker '{0}' in metadata")]
    MissingGender(String),

    #[error("speaker '{0}' has no readable utterances")]
    NoUtterances(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("shape mismatch in {stage}: expected {expected}, got {got}")]
    Shape {
        stage: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has {found}, this build reads {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint mode mismatch: file was trained in '{found}' mode, run is '{requested}'")]
    CheckpointMode { found: String, requested: String },

    #[error("eval error: {0}")]
    Eval(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error at {path}: {message}")]
    Wav { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
