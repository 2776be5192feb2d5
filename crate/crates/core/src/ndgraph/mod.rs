//! Minimal reverse-mode autodiff: a dense f64 [`Tensor`] plus a Wengert
//! [`Tape`] covering exactly the operations the adaptation losses need.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape, LOG_FLOOR, SIGMOID_FLOOR};
pub use tensor::Tensor;
