use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::episode::Episode;
use crate::nn::{mlp_forward, BaseParams, Hyperprior, HyperpriorKind, HyperpriorRun, ParamSet, PriorSchedule, VInit};
use crate::scalar::Scalar;

use super::summary::{feature_mean, summarize_with};
use super::{blend_node, clamp_unit, Ablation, AMode, EngineError, FrozenValues, Lambda, SummaryMode, VMode};

/// How epoch predictions enter the running ensemble.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Raw logits `z_m`.
    #[default]
    Logits,
    /// `softmax(z_m)`.
    Probabilities,
}

/// Everything the inner loop learns across episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams<T> {
    pub theta: BaseParams<T>,
    pub psi_a: Hyperprior<T>,
    pub psi_v: Hyperprior<T>,
    pub priors: PriorSchedule<T>,
}

impl<T: Scalar> MetaParams<T> {
    /// Random `theta` over `dims`; both hyperprior learners start out
    /// emitting the initial priors `(alpha_init, v'_m)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        kind: HyperpriorKind,
        hidden: usize,
        epochs: usize,
        alpha_init: T,
        v_init: VInit,
        rng: &mut R,
    ) -> Self {
        let theta = BaseParams::init(dims, rng);
        let priors = PriorSchedule::init(epochs, alpha_init, v_init);
        let input = super::summary_dim(dims[0], 2 * (dims.len() - 1));
        let bias = |m: usize| [priors.alpha[m], priors.v[m]];
        let psi_a = Hyperprior::init(kind, input, hidden, epochs, bias, rng);
        let psi_v = Hyperprior::init(kind, input, hidden, epochs, bias, rng);
        Self {
            theta,
            psi_a,
            psi_v,
            priors,
        }
    }

    pub fn epochs(&self) -> usize {
        self.priors.epochs()
    }

    pub fn kind(&self) -> HyperpriorKind {
        self.psi_a.kind()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundMeta {
        let theta = self.theta.bind(g);
        let psi_a = self.psi_a.bind(g);
        let psi_v = self.psi_v.bind(g);
        let (alpha_prior, v_prior) = self.priors.bind(g);
        BoundMeta {
            kind: self.kind(),
            theta,
            psi_a,
            psi_v,
            alpha_prior,
            v_prior,
        }
    }

    pub fn is_finite(&self) -> bool {
        let tensors_ok = |ts: Vec<&Tensor<T>>| ts.iter().all(|t| t.is_finite());
        tensors_ok(self.theta.tensors())
            && tensors_ok(self.psi_a.tensors())
            && tensors_ok(self.psi_v.tensors())
            && self.priors.alpha.iter().chain(&self.priors.v).all(|x| x.is_finite())
    }
}

/// Graph handles of a bound [`MetaParams`].
#[derive(Clone, Debug)]
pub struct BoundMeta {
    pub kind: HyperpriorKind,
    pub theta: Vec<NodeId>,
    pub psi_a: Vec<NodeId>,
    pub psi_v: Vec<NodeId>,
    pub alpha_prior: Vec<NodeId>,
    pub v_prior: Vec<NodeId>,
}

impl BoundMeta {
    /// All handles in `theta, psi_a, psi_v, alpha_prior, v_prior` order.
    pub fn all(&self) -> Vec<NodeId> {
        [&self.theta, &self.psi_a, &self.psi_v, &self.alpha_prior, &self.v_prior]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerConfig<T> {
    pub epochs: usize,
    pub mode: SummaryMode,
    pub lambda_alpha: Lambda<T>,
    pub lambda_v: Lambda<T>,
    pub fixed_alpha: T,
    pub constrained: bool,
    pub combine: Combine,
    pub ablation: Ablation,
    /// Required by the `optimal` modes.
    pub frozen: Option<FrozenValues>,
    /// Keep every epoch's test scores in the trace.
    pub keep_scores: bool,
}

impl<T: Scalar> InnerConfig<T> {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.epochs == 0 {
            return Err(EngineError::Config("epochs must be at least 1".into()));
        }
        if self.ablation.needs_frozen() {
            let frozen = self.frozen.as_ref().ok_or_else(|| {
                EngineError::Config(format!("ablation {} needs frozen values", self.ablation))
            })?;
            if frozen.alpha.len() != self.epochs || frozen.v.len() != self.epochs {
                return Err(EngineError::Config(format!(
                    "frozen values cover {} / {} epochs, expected {}",
                    frozen.alpha.len(),
                    frozen.v.len(),
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Result of one episode's inner loop. `y_hat` and the graph it lives in
/// stay differentiable back to every bound meta parameter.
#[derive(Clone, Debug)]
pub struct InnerTrace<T> {
    pub alphas: Vec<T>,
    pub vs: Vec<T>,
    pub train_losses: Vec<T>,
    pub y_hat: NodeId,
    pub y_hat_value: Tensor<T>,
    /// `z_m` values (after the combine transform) when requested.
    pub per_epoch_scores: Option<Vec<Tensor<T>>>,
    /// `Theta_1 .. Theta_M` values.
    pub adapted: Vec<Vec<Tensor<T>>>,
}

/// Trains the `M` epoch-wise base-learners of one episode and accumulates
/// their weighted test predictions.
pub fn inner_loop<T: Scalar>(
    g: &mut Graph<T>,
    episode: &Episode,
    meta: &BoundMeta,
    cfg: &InnerConfig<T>,
) -> Result<InnerTrace<T>, EngineError> {
    cfg.validate()?;
    let m_total = cfg.epochs;
    for (what, got) in [("alpha prior", meta.alpha_prior.len()), ("v prior", meta.v_prior.len())] {
        if got != m_total {
            return Err(EngineError::Config(format!("{what} has {got} entries, expected {m_total}")));
        }
    }
    let train_x = g.constant(episode.train_x.cast());
    let test_x = g.constant(episode.test_x.cast());
    let fm = feature_mean::<T>(episode, cfg.mode);
    let use_psi = cfg.ablation.uses_hyperprior();
    let mut run_a = HyperpriorRun::new(meta.kind, meta.psi_a.clone());
    let mut run_v = HyperpriorRun::new(meta.kind, meta.psi_v.clone());
    let pick = [g.constant(Tensor::unit(2, 1, 0, 0)), g.constant(Tensor::unit(2, 1, 1, 0))];

    let mut theta = meta.theta.clone();
    let mut alphas = Vec::with_capacity(m_total);
    let mut vs = Vec::with_capacity(m_total);
    let mut train_losses = Vec::with_capacity(m_total);
    let mut adapted = Vec::with_capacity(m_total);
    let mut scores = cfg.keep_scores.then(Vec::new);
    let mut y_hat: Option<NodeId> = None;
    let mut last_alpha = f64::NAN;

    for m in 0..m_total {
        let epoch = m + 1;
        let non_finite = |what, alpha| EngineError::NonFinite { what, epoch, alpha };
        let logits = mlp_forward(g, train_x, &theta)?;
        if !g.value(logits).is_finite() {
            return Err(non_finite("training logits", last_alpha));
        }
        let loss = g
            .softmax_cross_entropy(logits, &episode.train_y)
            .map_err(|_| non_finite("training loss", last_alpha))?;
        train_losses.push(g.value(loss).item());
        let grads = g.grad(loss, &theta, true)?;

        let delta = if use_psi {
            let summary = summarize_with(g, &fm, &grads, cfg.mode)?;
            let da = run_a.step(g, summary.vector)?;
            let dv = run_v.step(g, summary.vector)?;
            Some((component(g, da, pick[0])?, component(g, dv, pick[1])?))
        } else {
            None
        };

        let alpha = match cfg.ablation.a_mode {
            AMode::E3bm => {
                let (da, _) = delta.expect("hyperprior queried");
                blend_node(g, meta.alpha_prior[m], da, cfg.lambda_alpha, cfg.constrained)?
            }
            AMode::Learnable if cfg.constrained => clamp_unit(g, meta.alpha_prior[m])?,
            AMode::Learnable => meta.alpha_prior[m],
            AMode::Optimal => {
                let c = g.scalar(T::of(cfg.frozen.as_ref().expect("validated").alpha[m]));
                if cfg.constrained {
                    clamp_unit(g, c)?
                } else {
                    c
                }
            }
            AMode::Fixed => g.scalar(cfg.fixed_alpha),
        };
        let v = match cfg.ablation.v_mode {
            VMode::E3bm => {
                let (_, dv) = delta.expect("hyperprior queried");
                blend_node(g, meta.v_prior[m], dv, cfg.lambda_v, cfg.constrained)?
            }
            VMode::Learnable if cfg.constrained => clamp_unit(g, meta.v_prior[m])?,
            VMode::Learnable => meta.v_prior[m],
            VMode::Optimal => {
                let c = g.scalar(T::of(cfg.frozen.as_ref().expect("validated").v[m]));
                if cfg.constrained {
                    clamp_unit(g, c)?
                } else {
                    c
                }
            }
            VMode::Equal => g.scalar(T::one() / T::of(m_total as f64)),
            VMode::LastEpoch => g.scalar(if epoch == m_total { T::one() } else { T::zero() }),
        };
        let alpha_value = g.value(alpha).item();
        last_alpha = alpha_value.as_f64();
        if !alpha_value.is_finite() || !g.value(v).item().is_finite() {
            return Err(non_finite("hyperparameter", last_alpha));
        }
        alphas.push(alpha_value);
        vs.push(g.value(v).item());

        let mut next = Vec::with_capacity(theta.len());
        for (&p, &gr) in theta.iter().zip(&grads) {
            let step = g.mul(gr, alpha)?;
            next.push(g.sub(p, step)?);
        }
        theta = next;
        if !theta.iter().all(|&p| g.value(p).is_finite()) {
            return Err(non_finite("base-learner parameters", last_alpha));
        }
        adapted.push(theta.iter().map(|&p| g.value(p).clone()).collect());

        let mut z = mlp_forward(g, test_x, &theta)?;
        if cfg.combine == Combine::Probabilities {
            z = g.softmax(z)?;
        }
        if let Some(s) = scores.as_mut() {
            s.push(g.value(z).clone());
        }
        let weighted = g.mul(z, v)?;
        y_hat = Some(match y_hat {
            None => weighted,
            Some(acc) => g.add(weighted, acc)?,
        });
    }

    let y_hat = y_hat.expect("at least one epoch");
    Ok(InnerTrace {
        alphas,
        vs,
        train_losses,
        y_hat,
        y_hat_value: g.value(y_hat).clone(),
        per_epoch_scores: scores,
        adapted,
    })
}

/// Scalar node holding column `pick` of a `[1, 2]` node.
fn component<T: Scalar>(g: &mut Graph<T>, pair: NodeId, pick: NodeId) -> Result<NodeId, EngineError> {
    let col = g.matmul(pair, pick)?;
    Ok(g.sum(col, None)?)
}

/// Row-wise argmax of the combined scores (ties to the lowest class) and
/// the fraction of them matching `test_y`.
pub fn predict<T: Scalar>(trace: &InnerTrace<T>, test_y: &[usize]) -> (Vec<usize>, f64) {
    let labels = trace.y_hat_value.argmax_rows();
    let hits = labels.iter().zip(test_y).filter(|(a, b)| a == b).count();
    let acc = if test_y.is_empty() {
        0.0
    } else {
        hits as f64 / test_y.len() as f64
    };
    (labels, acc)
}
