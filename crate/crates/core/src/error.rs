use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was driven in an order it does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values appeared during optimization.
    #[error("training diverged at {location}: {detail}")]
    Divergence { location: String, detail: String },

    /// The sampler or a head produced a non-finite action.
    #[error("policy diverged: {0}")]
    PolicyDivergence(String),

    #[error("scene {scene_id} is infeasible: {reason}")]
    SceneInfeasible { scene_id: String, reason: String },

    #[error("scene generation stalled after {attempts} attempts for scene index {index}")]
    GenerationStall { index: usize, attempts: usize },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Csv { path: String, line: usize, message: String },

    #[error("bad file format in {path}: {message}")]
    Format { path: String, message: String },

    #[error("missing prerequisite artifact {0}; run the producing subcommand first")]
    MissingArtifact(PathBuf),

    #[error("world misconfigured: expert failed {failed} of {total} episodes")]
    ExpertFailure { failed: usize, total: usize },

    #[error("environment {index}: {source}")]
    Env {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into().display().to_string(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
