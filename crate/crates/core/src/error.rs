use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unknown head index {index} (model has {count} heads)")]
    UnknownHead { index: usize, count: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("empty evaluation cell (class {class}, group {group})")]
    EmptyCell { class: usize, group: u8 },

    #[error("missing state: {0}")]
    Missing(String),

    #[error("zero-variance representation in CKA")]
    ZeroVariance,

    #[error("no free weights remain in layer {layer} for pruning")]
    NoFreeWeights { layer: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
