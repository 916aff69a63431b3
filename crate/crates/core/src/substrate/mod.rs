//! Differentiable `f64` tensor operations with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, smooth_l1_scalar};
