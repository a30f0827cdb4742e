use rayon::prelude::*;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::engine::{inner_loop, AMode, EngineError, InnerConfig, InnerTrace, MetaParams, VMode};
use crate::episode::{mix_seed, Episode};
use crate::nn::ParamSet;

use super::{AdamState, MetaState, ThetaOptimizer, TrainError};

/// Mean softmax cross-entropy of the combined scores against `test_y`.
pub fn episode_test_loss(g: &mut Graph<f64>, trace: &InnerTrace<f64>, test_y: &[usize]) -> Result<NodeId, AutodiffError> {
    g.softmax_cross_entropy(trace.y_hat, test_y)
}

/// Episode seeds of the meta-batch drawn at `iteration`.
pub fn training_seeds(seed: u64, iteration: u64, batch: usize) -> Vec<u64> {
    (0..batch as u64).map(|b| mix_seed(&[seed, 2, iteration, b])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// Mean episode test loss of the batch.
    Accepted { loss: f64 },
    Rejected { reason: String },
}

struct EpisodeGrad {
    loss: f64,
    grads: Vec<Tensor<f64>>,
    alphas: Vec<f64>,
    vs: Vec<f64>,
}

fn episode_grad(params: &MetaParams<f64>, episode: &Episode, cfg: &InnerConfig<f64>) -> Result<EpisodeGrad, EngineError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let trace = inner_loop(&mut g, episode, &bound, cfg)?;
    let loss = episode_test_loss(&mut g, &trace, &episode.test_y)?;
    let grads = g.grad(loss, &bound.all(), false)?;
    Ok(EpisodeGrad {
        loss: g.value(loss).item(),
        grads: grads.into_iter().map(|n| g.value(n).clone()).collect(),
        alphas: trace.alphas,
        vs: trace.vs,
    })
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
pub(crate) fn ordered_map<I: Sync, O: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> O + Sync + Send,
) -> Vec<O> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// One meta-gradient step on the batch mean of the episode test losses.
///
/// Per-episode gradients may be computed on `workers` threads; they are
/// summed in batch order, so the result does not depend on `workers`. A
/// non-finite loss or gradient rejects the step and leaves `state` as it was.
pub fn meta_step(state: &mut MetaState, batch: &[Episode], workers: usize) -> Result<StepOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let cfg = state.config.inner(state.frozen.clone())?;
    let params = &state.params;
    let results = ordered_map(batch, workers, |ep| episode_grad(params, ep, &cfg));

    let reject = |state: &MetaState, reason: String| {
        log::warn!("iteration {}: meta step rejected ({reason})", state.iteration + 1);
        Ok(StepOutcome::Rejected { reason })
    };
    let mut per_episode = Vec::with_capacity(batch.len());
    for r in results {
        match r {
            Ok(e) => per_episode.push(e),
            Err(e @ (EngineError::NonFinite { .. } | EngineError::Autodiff(AutodiffError::Domain { .. }))) => {
                return reject(state, e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut mean: Vec<Tensor<f64>> = per_episode[0].grads.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for e in &per_episode {
        loss += e.loss;
        for (acc, g) in mean.iter_mut().zip(&e.grads) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
    }
    for t in &mut mean {
        for a in t.data_mut() {
            *a *= scale;
        }
    }
    loss *= scale;
    if !loss.is_finite() || !mean.iter().all(|t| t.is_finite()) {
        return reject(state, "non-finite meta-gradient".into());
    }

    let epochs = state.config.epochs;
    let mut next = state.params.clone();
    let n_theta = next.theta.tensors().len();
    let n_a = next.psi_a.tensors().len();
    let n_v = next.psi_v.tensors().len();
    let (g_theta, rest) = mean.split_at(n_theta);
    let (g_a, rest) = rest.split_at(n_a);
    let (g_v, rest) = rest.split_at(n_v);
    let (g_alpha, g_vp) = rest.split_at(epochs);
    let c = &state.config;

    let adam = match c.theta_optimizer {
        ThetaOptimizer::Sgd => {
            next.theta.descend(g_theta, c.beta_theta);
            None
        }
        ThetaOptimizer::Adam => Some(adam_update(&mut next.theta, g_theta, c.beta_theta, state.adam.as_ref())),
    };
    let mean_of = |pick: fn(&EpisodeGrad) -> &Vec<f64>, m: usize| per_episode.iter().map(|e| pick(e)[m]).sum::<f64>() * scale;
    match c.ablation.a_mode {
        AMode::E3bm => {
            next.psi_a.descend(g_a, c.beta1);
            // A zero rate freezes the whole alpha side, handoff included.
            if c.beta1 != 0.0 {
                for m in 0..epochs {
                    next.priors.alpha[m] = mean_of(|e| &e.alphas, m);
                }
            }
        }
        AMode::Learnable => {
            for m in 0..epochs {
                next.priors.alpha[m] -= c.beta_theta * g_alpha[m].item();
            }
        }
        AMode::Optimal | AMode::Fixed => {}
    }
    match c.ablation.v_mode {
        VMode::E3bm => {
            next.psi_v.descend(g_v, c.beta2);
            if c.beta2 != 0.0 {
                for m in 0..epochs {
                    next.priors.v[m] = mean_of(|e| &e.vs, m);
                }
            }
        }
        VMode::Learnable => {
            for m in 0..epochs {
                next.priors.v[m] -= c.beta_theta * g_vp[m].item();
            }
        }
        VMode::Optimal | VMode::Equal | VMode::LastEpoch => {}
    }
    if !next.is_finite() {
        return reject(state, "non-finite parameters after update".into());
    }
    state.params = next;
    if adam.is_some() {
        state.adam = adam;
    }
    state.iteration += 1;
    Ok(StepOutcome::Accepted { loss })
}

fn adam_update<P: ParamSet<f64>>(params: &mut P, grads: &[Tensor<f64>], lr: f64, prev: Option<&AdamState>) -> AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut st = prev.cloned().unwrap_or_else(|| AdamState {
        step: 0,
        m: grads.iter().map(|g| Tensor::zeros(g.shape())).collect(),
        v: grads.iter().map(|g| Tensor::zeros(g.shape())).collect(),
    });
    st.step += 1;
    let c1 = 1.0 - B1.powi(st.step as i32);
    let c2 = 1.0 - B2.powi(st.step as i32);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut st.m).zip(&mut st.v) {
        for (((x, &d), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = B1 * *mi + (1.0 - B1) * d;
            *vi = B2 * *vi + (1.0 - B2) * d * d;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
        }
    }
    st
}
