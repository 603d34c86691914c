use std::path::Path;

use lane_sentinel::attack::AttackError;
use lane_sentinel::dataset::DatasetError;
use lane_sentinel::geometry::GeometryError;
use lane_sentinel::img::ImgError;
use lane_sentinel::metrics::MetricsError;
use lane_sentinel::neural::NeuralError;
use lane_sentinel::scene::SceneError;
use thiserror::Error;

/// Top-level command error. Every variant renders as a single
/// machine-readable JSON object on stderr (see [`CliError::to_json`]).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad argument: {0}")]
    Arg(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no results in {0}")]
    NoResults(String),
    #[error("config hash mismatch: {context} was produced under {found}, current config hashes to {expected}; pass --force to evaluate anyway")]
    HashMismatch {
        context: String,
        found: String,
        expected: String,
    },
}

impl CliError {
    /// Stable machine-readable kind for scripting against stderr output.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Arg(_) => "argument",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Scene(_) => "scene",
            CliError::Geometry(_) => "geometry",
            CliError::Img(_) => "image",
            CliError::Dataset(_) => "dataset",
            CliError::Neural(_) => "neural",
            CliError::Attack(_) => "attack",
            CliError::Metrics(_) => "metrics",
            CliError::NoResults(_) => "no-results",
            CliError::HashMismatch { .. } => "hash-mismatch",
        }
    }

    /// One-line JSON rendering for stderr: `{"error": kind, "message": text}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn json_err(path: &Path, source: serde_json::Error) -> CliError {
    CliError::Json {
        path: path.display().to_string(),
        source,
    }
}
