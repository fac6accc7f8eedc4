use thiserror::Error;

pub type Result<T, E = FanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FanError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid box [{0}, {1}, {2}, {3}]: needs finite coordinates and positive area")]
    InvalidBox(f64, f64, f64, f64),
    #[error("image {width}x{height} is not divisible by the largest stride {multiple}")]
    NotDivisible {
        width: usize,
        height: usize,
        multiple: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: usize, report: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FanError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        FanError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
