//! Minimal dense-tensor engine with reverse-mode differentiation, covering
//! exactly the layers the classifier needs.

mod graph;
mod tensor;

pub mod check;

pub use graph::{sigmoid, softmax_rows, BatchStats, Gradients, Graph, Var, BN_EPS, PROB_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
