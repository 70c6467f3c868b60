use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {id} out of range for table of size {size}")]
    Index { id: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("document {doc}: token {token}: {reason}")]
    Document {
        doc: String,
        token: usize,
        reason: String,
    },

    #[error("document {0}: invalid record: {1}")]
    Record(String, String),

    #[error("unknown tag {0:?}")]
    UnknownTag(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("label {0:?} in evaluation split was not seen during training")]
    UnseenLabel(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed for {param}[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_err:e}")]
    GradCheck {
        param: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },
}
