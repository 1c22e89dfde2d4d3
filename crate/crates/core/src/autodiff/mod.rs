//! Minimal dense-tensor reverse-mode autodiff with a first-order optimizer.
//!
//! f32 is the working precision for training; every op is also instantiated
//! at f64 so gradients can be verified against central finite differences
//! (see [`grad_check`]). A [`Tape`] and its tensors belong to one thread for
//! the duration of a forward/backward pass; the matrix kernels may fan rows
//! out across threads internally, which is bitwise deterministic because no
//! accumulation crosses a row boundary.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_multi, GradReport};
pub use tape::{Mask, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{mm, mm_nt, mm_tn, Scalar, Tensor};
