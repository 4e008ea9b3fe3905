use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("noisy sample for ground truth {gt_index} not accepted after {attempts} draws")]
    RejectionExhausted { gt_index: usize, attempts: usize },

    #[error("probability {0} outside (0, 1)")]
    Domain(f64),

    #[error("every difficulty prior is zero (all IoUs equal 1); difficulty weighting is undefined")]
    DegenerateBatch,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown category {0}")]
    UnknownCategory(String),

    #[error("requested {requested} negative prompts but only {available} categories remain")]
    InsufficientLabelSpace { requested: usize, available: usize },

    #[error("non-finite activation produced by {op}")]
    NonFiniteActivation { op: &'static str },

    #[error("could not place {objects} non-overlapping objects in {attempts} attempts")]
    PlacementFailure { objects: usize, attempts: usize },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: String },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("non-finite loss term {term}")]
    NonFiniteLoss { term: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("held-out categories present in the training split: {0:?}")]
    SplitContamination(Vec<String>),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
