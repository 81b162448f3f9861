//! Minimal differentiable-array core.

mod array;
mod checkpoint;
pub mod gradcheck;
mod param;
mod scalar;
mod tape;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_param_gradients, finite_difference_check, floored_error, relative_error, ROUNDING_FLOOR, kink_margin, randomize_biases, GradCheckReport};
pub use param::{ParamId, ParamSet, Parameter};
pub use scalar::{gemm, Precision, Scalar};
pub use tape::{log_softmax_rows, one_hot, Gradients, Tape, Var};
#[allow(unused_imports)]
pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
