//! Minimal reverse-mode differentiation: a value type, a recording tape and
//! the primitive set the decoder needs.

mod array;
mod gradcheck;
mod ops;
mod tape;

pub use array::{strides, NdArray};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, Stencil};
pub use ops::{LAYER_NORM_EPS, MASK_VALUE};
pub(crate) use ops::sigmoid;
pub use tape::{Backward, Gradients, Tape, Var};
