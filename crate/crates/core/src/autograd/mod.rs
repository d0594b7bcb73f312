//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.
//!
//! A [`Tape`] records every operation of a forward pass. Backward walks the
//! tape once in reverse, accumulating gradients into leaves and into the
//! [`ParamStore`](crate::ParamStore) behind parameter leaves.

mod gradcheck;
mod nn_ops;
mod ops;
mod tape;

pub use gradcheck::{check_param_gradients, finite_difference_grad, relative_error, GradCheckReport};
pub use nn_ops::{resize_bilinear, BatchStats};
pub use ops::{BinaryKind, ReduceKind};
pub use tape::{Gradients, OpKind, Tape, Var};
