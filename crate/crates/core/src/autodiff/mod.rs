//! Dense tensors, a reverse-mode autodiff graph, Adam, and a finite-difference
//! gradient oracle.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState, OptimizerConfig};
pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error, DEFAULT_STEP};
pub use graph::{sinusoidal_embedding, Gradients, Graph, NodeId, PROB_CLAMP};
pub use tensor::Tensor;
