//! Minimal reverse-mode automatic differentiation over dense `f64`
//! scalars, vectors and matrices.
//!
//! A [`Graph`] evaluates every operation eagerly and records it on a tape.
//! [`Graph::backward`] sweeps the tape once in reverse from a scalar root and
//! returns the gradient of each trainable leaf. Constants never receive
//! gradient, which is how frozen parameters and detached values are modelled.
//!
//! ```
//! use vcforge::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().as_scalar(), Some(6.0));
//! ```

mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use gradcheck::{eval_with_grad, finite_diff_check};
pub(crate) use graph::column_moments;
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("tensor of shape {shape} cannot hold {len} values")]
    InvalidTensor { shape: Shape, len: usize },
    #[error("backward requires a scalar root, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("powf of negative value {value} at index {index}")]
    PowDomain { index: usize, value: f64 },
    #[error("{op}: division by zero at index {index}")]
    DivisionByZero { op: &'static str, index: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("node {0} has no gradient (constant or not a leaf)")]
    NoGradient(usize),
    #[error("non-finite function value near coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("analytic gradient has {actual} entries, expected {expected}")]
    GradientLength { expected: usize, actual: usize },
}
