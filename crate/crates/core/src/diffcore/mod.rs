//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var, LOG_CLAMP};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
