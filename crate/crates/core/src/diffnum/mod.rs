//! Differentiable dense numerics: tensors, a recording tape with reverse-mode
//! gradients, named parameter sets, Adam, and binary checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, GradMap, ParamSet};
pub use tensor::Tensor;
