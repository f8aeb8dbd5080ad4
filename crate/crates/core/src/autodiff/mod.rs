//! A small reverse-mode automatic differentiation tape over [`Tensor`](crate::tensor::Tensor)s.

mod conv;
pub mod gradcheck;
mod graph;
pub mod linalg;
mod ops;
mod sample;

pub use conv::ConvGeometry;
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use sample::SparseMap;
