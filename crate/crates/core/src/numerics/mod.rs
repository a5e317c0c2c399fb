//! Dense `f64` tensors, a tape-based reverse-mode autodiff, AdamW and
//! finite-difference gradient checking.

mod adamw;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod primitive;
pub mod rng;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, Graph, Mode, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use primitive::Primitive;
pub use tensor::Tensor;

use thiserror::Error;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
