//! Numeric substrate: dense f64 tensors, a reverse-mode gradient tape,
//! deterministic counter-based RNG streams, and Adam.

mod adam;
mod gradcheck;
mod rng;
mod tape;
pub(crate) mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use rng::RngStream;
pub use tape::{GradTape, NodeId};
pub use tensor::{BinaryKind, ReduceKind, Tensor, UnaryKind};
pub use tensor::{log_sum_exp_slice, sigmoid as scalar_sigmoid, softplus as scalar_softplus};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("domain error in {op} at flat index {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on a consumed tape")]
    TapeConsumed,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("non-deterministic function under grad_check: {0} != {1}")]
    NonDeterministic(f64, f64),
    #[error("subset size {requested} exceeds ground set size {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("empty reduction axis in {0}")]
    EmptyAxis(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
