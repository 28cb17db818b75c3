//! Dense tensors, reverse-mode autodiff, parameters and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{bce_term, log_sum_exp, sigmoid, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: normalised axis has no valid entries")]
    EmptyAxis { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("parameter name `{0}` already registered")]
    DuplicateParam(String),
    #[error("unfrozen parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
