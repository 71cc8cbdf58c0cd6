//! Minimal dense-array engine with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use graph::{Graph, TensorNode, Var};
pub use params::ParamStore;
pub use real::{Precision, Real};
pub use tensor::Tensor;
