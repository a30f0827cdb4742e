//! The per-episode inner loop: `M` epoch-wise base-learners whose learning
//! rates and ensemble weights come from the hyperprior learners, combined
//! into one running prediction.

mod ablation;
mod inner;
pub mod reference;
mod summary;

pub use ablation::{Ablation, AMode, FrozenValues, VMode};
pub use inner::{inner_loop, predict, BoundMeta, Combine, InnerConfig, InnerTrace, MetaParams};
pub use summary::{summarize, summary_dim, SummaryMode, TaskSummary};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::nn::NnError;
use crate::scalar::Scalar;

/// Margin kept from 0 and 1 by constraint mode.
pub const CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("lambda must lie strictly between 0 and 1, got {0}")]
    Lambda(f64),
    #[error("non-finite {what} at epoch {epoch} (alpha = {alpha})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        alpha: f64,
    },
    #[error("{0}")]
    Config(String),
}

/// Blend fraction of the prior, validated to lie in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda<T>(T);

impl<T: Scalar> Lambda<T> {
    pub fn new(x: T) -> Result<Self, EngineError> {
        if x > T::zero() && x < T::one() {
            Ok(Self(x))
        } else {
            Err(EngineError::Lambda(x.as_f64()))
        }
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// `lambda * prior + (1 - lambda) * delta`, clamped to
/// `(CLAMP_EPS, 1 - CLAMP_EPS)` when `constrained`.
pub fn blend<T: Scalar>(prior: T, delta: T, lambda: Lambda<T>, constrained: bool) -> T {
    let l = lambda.get();
    let x = l * prior + (T::one() - l) * delta;
    if constrained {
        let eps = T::of(CLAMP_EPS);
        x.max(eps).min(T::one() - eps)
    } else {
        x
    }
}

/// Graph form of [`blend`] on scalar nodes. The clamp is
/// `lo + relu(x - lo) - relu(x - hi)`.
pub fn blend_node<T: Scalar>(
    g: &mut Graph<T>,
    prior: NodeId,
    delta: NodeId,
    lambda: Lambda<T>,
    constrained: bool,
) -> Result<NodeId, AutodiffError> {
    let l = lambda.get();
    let p = g.scale(prior, l)?;
    let d = g.scale(delta, T::one() - l)?;
    let x = g.add(p, d)?;
    if constrained {
        clamp_unit(g, x)
    } else {
        Ok(x)
    }
}

pub(crate) fn clamp_unit<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId, AutodiffError> {
    let lo = T::of(CLAMP_EPS);
    let hi = T::one() - lo;
    let lo_n = g.scalar(lo);
    let hi_n = g.scalar(hi);
    let above_lo = g.sub(x, lo_n)?;
    let above_lo = g.relu(above_lo)?;
    let above_hi = g.sub(x, hi_n)?;
    let above_hi = g.relu(above_hi)?;
    let y = g.add(lo_n, above_lo)?;
    g.sub(y, above_hi)
}
