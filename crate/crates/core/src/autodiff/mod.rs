//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use adam::{AdamState, ParamSet};
pub use graph::{Bindings, Gradients, Graph, Mode, NodeId, Values};
pub use graph::{sigmoid, softplus};
pub use tensor::Tensor;
