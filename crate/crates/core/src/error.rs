use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("empty text after cleaning")]
    EmptyText,
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("template bank cannot produce {wanted} distinct captions (have {available})")]
    TemplateBankTooSmall { wanted: usize, available: usize },
    #[error("oracle classifier not validated: held-out accuracy {accuracy:.4} < {required:.2}")]
    OracleNotValidated { accuracy: f64, required: f64 },
    #[error("non-finite loss at step {step}: {what}")]
    NonFiniteLoss { step: u64, what: String },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
