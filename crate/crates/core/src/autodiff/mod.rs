//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Every backward rule is written in terms of the same primitive set the
//! forward pass uses, so gradients are themselves graph nodes and can be
//! differentiated again. That is what lets an episode's test loss be
//! backpropagated through unrolled inner gradient steps.
//!
//! Broadcasting is limited to `(matrix, [1, n] row)` and `(tensor, scalar)`
//! pairs, in either operand order.

mod backward;
mod graph;
mod tensor;

pub use graph::{Graph, NodeId, Op};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadRank { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: domain violation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} does not require grad")]
    NoGrad(usize),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("{op}: label {label} out of range for {classes} classes")]
    Label {
        op: &'static str,
        label: usize,
        classes: usize,
    },
}
