use thiserror::Error;

use crate::model::ValidationReport;

/// Errors raised by model construction, inference, learning, and the data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty index set")]
    EmptyIndexSet,

    #[error("covariance block is singular even after flooring")]
    SingularCovariance,

    #[error("all emission likelihoods vanished at slot {t}")]
    EmissionUnderflow { t: usize },

    #[error("state {state} collapsed: posterior mass {mass:e} below threshold")]
    StateCollapse { state: usize, mass: f64 },

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: Box<Error> },

    #[error("no states were designated as asleep")]
    EmptySleepStates,

    #[error("requested {requested} states but only {usable} usable rows are available")]
    NotEnoughRows { requested: usize, usable: usize },

    #[error("feature `{name}` has no observed values")]
    FullyMissingFeature { name: String },

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("no jointly labeled slots between prediction and truth")]
    NoJointSlots,

    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("feature `{feature}` not present in {path}")]
    UnknownFeature { feature: String, path: String },

    #[error("model file version {found} is unsupported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("every candidate state count failed to fit")]
    SweepFailed,

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
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
