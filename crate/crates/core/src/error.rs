use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid label {label} for {n_domains} domains")]
    InvalidLabel { label: usize, n_domains: usize },
    #[error("value outside the domain of {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("judge real-test accuracy {accuracy:.4} is below the usability floor {floor:.2}")]
    JudgeUnusable { accuracy: f64, floor: f64 },
    #[error("{0}")]
    Observer(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
