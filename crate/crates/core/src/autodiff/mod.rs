//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in [`Tensor`]; a [`Tape`] records each op as it runs and
//! [`Tape::backward`] replays the record in reverse creation order, visiting
//! every node once. [`Var`] is a cheap handle to a recorded node.

mod ops;
mod optim;
mod tape;
mod tensor;

pub use ops::{gelu_scalar, kl_teacher_student, LAYER_NORM_EPS};
pub use optim::{AdamWConfig, AdamWState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
