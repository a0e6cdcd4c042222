//! Dense tensors, reverse-mode differentiation, finite-difference checking
//! and the parameter checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod linalg;
pub mod tensor;

pub use checkpoint::ParamStore;
pub use gradcheck::{gradient_check, CheckOptions, GradReport, Probe};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::Tensor;
