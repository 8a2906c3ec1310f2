use thiserror::Error;

/// Errors produced anywhere in the decode, tokenizer, model and harness paths.
#[derive(Debug, Error)]
pub enum ItcError {
    #[error("infeasible transport problem: {axis} {index} has no finite cost entry")]
    Infeasible { axis: &'static str, index: usize },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("distribution is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("binarization did not cover every destination within {rounds} rounds")]
    BinarizeExhausted { rounds: usize },

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite loss {loss} for batch {fingerprint}")]
    NonFiniteLoss { loss: f64, fingerprint: String },

    #[error("codebook hash mismatch: model {model}, dataset {dataset}")]
    CodebookMismatch { model: String, dataset: String },

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ItcError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ItcError {
    pub fn stage(stage: &'static str) -> impl FnOnce(ItcError) -> ItcError {
        move |e| ItcError::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for failures that originate in arithmetic rather than input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            ItcError::Infeasible { .. }
            | ItcError::NotNormalized { .. }
            | ItcError::BinarizeExhausted { .. }
            | ItcError::NonFiniteLoss { .. } => true,
            ItcError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = ItcError> = std::result::Result<T, E>;
