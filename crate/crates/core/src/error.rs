use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` holds no gradient")]
    MissingGrad(String),

    #[error("label {label} at pixel {pixel} is out of range for {classes} classes")]
    LabelOutOfRange { pixel: usize, label: u8, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },

    #[error("dataset `{0}` carries no labels")]
    Unlabeled(String),

    #[error("target image set differs from the one the weights were computed on")]
    TargetMismatch,

    #[error("domain `{domain}` disagrees with the federation: {reason}")]
    DomainMismatch { domain: String, reason: String },

    #[error("message #{index} {from} -> {to} ({kind}) violates federation policy: {reason}")]
    PolicyViolation { index: usize, from: String, to: String, kind: &'static str, reason: &'static str },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
}

impl Error {
    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { name, reason: reason.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
