//! Minimal dense-tensor computation kernel with reverse-mode gradients.
//!
//! The kernel is deliberately small: row-major `f64` tensors, a fixed set of
//! primitives (elementwise arithmetic, gemm, a handful of activations,
//! `lgamma`, row-wise softmax, full reductions, slice/concat) and a static
//! acyclic [`Graph`] with named parameter leaves and a single scalar loss.
//! Broadcasting is limited to scalar-tensor and row/column vectors against a
//! matrix; anything fancier is out of scope.
//!
//! Gradients are exact reverse-mode derivatives. [`finite_diff_check`] is the
//! independent verification harness: central differences per parameter
//! coordinate, reported with the max relative error.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, GradReport};
pub use graph::{Graph, GraphBuilder, NodeId};
pub use tensor::Tensor;
