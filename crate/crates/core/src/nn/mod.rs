//! Differentiable models: the MLP base-learner and the two hyperprior
//! learner architectures (independent per-epoch FC heads, shared LSTM).

mod hyperprior;
mod init;
mod lstm;
mod mlp;

pub use hyperprior::{fc_head, FcHyperprior, Hyperprior, HyperpriorKind, HyperpriorRun, PriorSchedule, VInit};
pub use init::xavier_uniform;
pub use lstm::{lstm_step, LstmCell, LstmGate, LstmHyperprior, LstmStep};
pub use mlp::{mlp_forward, BaseParams, Dense};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dim {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("epoch {epoch} out of range for {epochs} per-epoch heads")]
    EpochOutOfRange { epoch: usize, epochs: usize },
}

/// An ordered collection of parameter tensors.
pub trait ParamSet<T: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<T>>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Registers every tensor as a trainable leaf, in `tensors()` order.
    fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| g.param(t.clone())).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `p <- p - rate * grad` for every tensor.
    fn descend(&mut self, grads: &[Tensor<T>], rate: T) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x = *x - rate * *d;
            }
        }
    }
}
