//! Dense `f32` tensors with a define-by-run reverse-mode autodiff tape.

mod array;
pub mod gradcheck;
mod kernels;
mod ops;
mod param;
mod tape;

pub use array::Tensor;
pub use gradcheck::{finite_difference_check, finite_difference_check_directional, finite_difference_check_params, relative_error, ParamCheckReport};
pub use ops::{OpAttrs, OpKind};
pub use param::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tape::{BatchNormMode, BatchStats, FlipAxis, Gradients, Tape, Var, COSINE_EPS};
