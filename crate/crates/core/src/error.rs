use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: extents {found:?} do not match {expected:?}")]
    ExtentMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{what}: value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite {term} ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("no body voxels above {threshold_hu} HU")]
    NoBody { threshold_hu: f32 },
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
