//! Dense arrays, a reverse-mode tape, AdamW and the one-cycle schedule.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod schedule;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_coords, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, ParamId, ParameterStore};
pub use schedule::{onecycle_lr, OneCycleConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable belongs to a graph that has been cleared")]
    GraphFreed,
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
