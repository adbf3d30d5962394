//! Dense tensors, forward kernels and a reverse-mode tape, generic over `f32`/`f64`.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, relative_error, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Scalar, Tensor};
