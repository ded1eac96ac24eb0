//! Dense tensors with a reverse-mode tape generic over the scalar type.
//!
//! Running the tape over [`Dual`] numbers gives forward-over-reverse
//! derivatives: the tangent of a gradient is a Hessian-vector product.

mod dual;
mod gemm;
mod graph;
mod scalar;
mod tensor;

pub use dual::Dual;
pub use gemm::{gemm, MatRef};
pub use graph::{CustomOp, Grads, Graph, NodeId};
pub use scalar::Real;
pub use tensor::{numel, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {expected:?} needs {} elements, got {got}", numel(expected))]
    Shape { expected: Vec<usize>, got: usize },
}
