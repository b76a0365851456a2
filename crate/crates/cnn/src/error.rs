use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network plan: {0}")]
    Plan(String),
    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },
    #[error("label {label} at sample {sample} is outside 0..{classes}")]
    Label {
        sample: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch of {size} is below the training floor of {floor}")]
    BatchTooSmall { size: usize, floor: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("backward pass needs a training-mode forward pass")]
    NotTrainMode,
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
    #[error(transparent)]
    Space(#[from] poolmix::Error),
}

pub type Result<T> = std::result::Result<T, CnnError>;

impl From<CnnError> for poolmix::Error {
    fn from(e: CnnError) -> Self {
        match e {
            CnnError::Space(inner) => inner,
            other => poolmix::Error::InvalidParameter(other.to_string()),
        }
    }
}
