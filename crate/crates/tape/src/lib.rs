//! Reverse-mode automatic differentiation for the matching network.
//!
//! Tensors are dense and row-major. A [`Tape`] records each operation applied
//! to [`Var`]s that (transitively) depend on a parameter or leaf; calling
//! [`Tape::backward`] on a scalar yields [`Gradients`]. Operations are coarse
//! (fused softmax, layer norm, convolution, loss kernels) to keep the graph
//! small on a single CPU core.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
