//! Dense tensors and a single-use reverse-mode tape.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_many, RELATIVE_ERROR_FLOOR};
pub use tape::{gelu_scalar, AttentionSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
