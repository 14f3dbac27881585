use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed input{}: {message}", record.map(|id| format!(" (record {id})")).unwrap_or_default())]
    MalformedInput {
        record: Option<i64>,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("mask has {0} connected components, expected exactly one")]
    MultipleComponents(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("anchor selection matches no node")]
    NoAnchors,

    #[error("invalid cluster count K={k} for {n} nodes")]
    InvalidK { k: usize, n: usize },

    #[error("backward pass reached non-differentiable kernel `{0}`")]
    UnsupportedKernel(&'static str),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("no epithelial nodes in the loss set")]
    EmptyEpithelialSet,

    #[error("labels contain a single class; balanced accuracy undefined")]
    SingleClassLabels,

    #[error("need at least {needed} units to build folds, got {got}")]
    TooFewUnits { needed: usize, got: usize },

    #[error("patient-grouped folds need a patient id for every graph")]
    MissingPatientIds,

    #[error("cannot place {requested} cells: {detail}")]
    InfeasibleDensity { requested: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn malformed(record: Option<i64>, message: impl Into<String>) -> Self {
        Error::MalformedInput {
            record,
            message: message.into(),
        }
    }

    /// True for errors caused by bad input files rather than runtime failures.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::MalformedInput { .. } | Error::Json { .. } | Error::MissingPatientIds => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
