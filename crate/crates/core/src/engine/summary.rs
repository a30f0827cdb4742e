use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::episode::Episode;
use crate::scalar::Scalar;

/// Which inputs the task summary may look at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryMode {
    /// Training inputs only.
    #[default]
    Inductive,
    /// Training inputs plus the unlabeled test inputs.
    Transductive,
}

/// Hyperprior input for one epoch.
#[derive(Clone, Copy, Debug)]
pub struct TaskSummary {
    /// Constant `[1, d]` mean of the inputs allowed by the mode.
    pub feature_mean: NodeId,
    /// `[1, 2T]`: mean and RMS of each gradient tensor, interleaved.
    pub grad_summary: NodeId,
    /// `[1, d + 2T]` concatenation of the two.
    pub vector: NodeId,
    pub mode: SummaryMode,
}

pub fn summary_dim(d: usize, param_tensors: usize) -> usize {
    d + 2 * param_tensors
}

/// Mean input feature row under `mode`.
pub fn feature_mean<T: Scalar>(episode: &Episode, mode: SummaryMode) -> Tensor<T> {
    let d = episode.dim();
    let mut acc = vec![0.0f64; d];
    let mut rows = 0usize;
    let mut add = |x: &Tensor<f64>| {
        for r in 0..x.rows() {
            for (a, v) in acc.iter_mut().zip(x.row_slice(r)) {
                *a += v;
            }
        }
        rows += x.rows();
    };
    add(&episode.train_x);
    if mode == SummaryMode::Transductive {
        add(&episode.test_x);
    }
    let mean: Vec<T> = acc.iter().map(|a| T::of(a / rows as f64)).collect();
    Tensor::row(&mean)
}

/// Builds the summary from a precomputed feature mean and the current
/// gradient nodes. RMS is `exp(0.5 * log(mean(g * g)))`, or a constant zero
/// when every entry is zero.
pub(crate) fn summarize_with<T: Scalar>(
    g: &mut Graph<T>,
    feature_mean: &Tensor<T>,
    grads: &[NodeId],
    mode: SummaryMode,
) -> Result<TaskSummary, AutodiffError> {
    let one = g.constant(Tensor::ones(&[1, 1]));
    let mut parts = Vec::with_capacity(2 * grads.len());
    for &gr in grads {
        let mean = g.mean(gr, None)?;
        let sq = g.mul(gr, gr)?;
        let ms = g.mean(sq, None)?;
        let rms = if g.value(ms).item() > T::zero() {
            let l = g.log(ms)?;
            let h = g.scale(l, T::of(0.5))?;
            g.exp(h)?
        } else {
            g.scalar(T::zero())
        };
        parts.push(g.mul(one, mean)?);
        parts.push(g.mul(one, rms)?);
    }
    let fm = g.constant(feature_mean.clone());
    let grad_summary = if parts.is_empty() {
        g.constant(Tensor::zeros(&[1, 0]))
    } else {
        g.concat(&parts, 1)?
    };
    let vector = if parts.is_empty() {
        fm
    } else {
        g.concat(&[fm, grad_summary], 1)?
    };
    Ok(TaskSummary {
        feature_mean: fm,
        grad_summary,
        vector,
        mode,
    })
}

/// Task summary of `episode` for gradient nodes `grads` of the base params.
pub fn summarize<T: Scalar>(
    g: &mut Graph<T>,
    episode: &Episode,
    grads: &[NodeId],
    mode: SummaryMode,
) -> Result<TaskSummary, AutodiffError> {
    summarize_with(g, &feature_mean(episode, mode), grads, mode)
}
