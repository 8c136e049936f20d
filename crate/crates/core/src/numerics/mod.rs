//! Dense-tensor kernels with reverse-mode automatic differentiation.
//!
//! The engine is a single-use tape: a [`Tape`] records every kernel
//! application, `backward` walks it once in reverse and fills leaf
//! gradients, and the tape is consumed. Tensors are plain row-major
//! buffers generic over `f32`/`f64`; training runs in `f32`, the `f64`
//! mode exists for finite-difference gradient verification.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, CoordReport, GradReport};
pub use params::{BoundParams, ParamStore};
pub use tape::{attention, Tape, Var};
pub use tensor::{DType, Elem, Tensor, TensorError};

pub(crate) use tensor::{matmul_raw, softmax_row_raw};
