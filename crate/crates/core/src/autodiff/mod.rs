//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error, DEFAULT_STEP};
pub use tape::{Tape, Var, ARCCOS_EPS, DOMAIN_FLOOR};
pub use tensor::{cosine_similarity, Tensor};

pub(crate) use tensor::{dot, norm};
