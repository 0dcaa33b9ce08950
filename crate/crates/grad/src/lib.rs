//! Reverse-mode automatic differentiation over dense, row-major tensors.
//!
//! The engine records a dynamic graph while operations execute. Every
//! [`Tensor`] is an immutable, reference-counted node; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and returns the gradients of all reachable leaves as [`Grads`].
//!
//! Operations that receive only constant inputs do not record anything, so
//! inference paths pay no bookkeeping cost.
//!
//! Shape mismatches inside the engine are programming errors and panic with a
//! descriptive message, the same way indexing an `ndarray` out of bounds does.
//! Callers that accept user data validate shapes before reaching this layer.

mod conv;
mod elementwise;
mod linear;
mod optim;
mod param;
mod real;
mod reduce;
mod shape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use param::Param;
pub use real::Real;
pub use tensor::{BackwardFn, Grads, Tensor};

/// Number of elements described by `shape`.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
