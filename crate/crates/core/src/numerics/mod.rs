//! Dense tensors, reverse-mode gradients, AdamW and gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_against, finite_diff_check, relative_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use graph::{expectile_weight, Graph, NodeGrads, Var};
pub(crate) use graph::log_sum_exp;
pub use optim::{adamw_update, clip_global_norm, AdamW};
pub use params::{global_norm, reverse_gradient, BoundParams, Gradients, Param, ParamStore};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
}
