//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a define-by-run [`Tape`]; [`Tape::backward`]
//! sweeps it once in reverse. The op set is deliberately small: every model
//! in the crate is composed from `add`, `mul`, `matmul`, `relu`, `sigmoid`,
//! `sin`, `cos`, `mean`, `concat`, `affine`, `reshape` and `bce_loss`.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamConfig, AdamState};
pub use tape::{bce_term, sigmoid, Gradients, Tape, Var, PROB_EPS};
pub(crate) use tensor::matmul_raw;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignNode,
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(f64),
    #[error("{op} of an empty input")]
    Empty { op: &'static str },
}
