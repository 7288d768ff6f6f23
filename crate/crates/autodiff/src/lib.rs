//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! Values are plain [`Tensor`]s. A forward pass records operations on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] then returns the
//! gradient of a scalar loss with respect to every recorded parameter.

mod conv;
mod error;
mod gradcheck;
mod io;
pub mod op_suite;
mod tape;
mod tensor;

pub use conv::ConvGeometry;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck};
pub use io::TensorFile;
pub use tape::{bce_with_logits, broadcast_shapes, Gradients, Tape, Var};
pub use tensor::Tensor;
