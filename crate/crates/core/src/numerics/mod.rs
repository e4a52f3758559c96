//! Dense tensors, forward kernels and a reverse-mode tape.

mod counter;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use counter::OpCounter;
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
pub use kernels::{bilinear_resize, bilinear_upsample, matmul, minmax_normalize, softmax_lastdim};
pub use tape::{Grads, Tape, Var, PAD_INDEX};
pub use tensor::{DType, Tensor, MAX_RANK};

pub(crate) use tape::argmin_argmax;
