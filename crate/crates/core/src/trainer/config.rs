use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::engine::{Ablation, Combine, InnerConfig, Lambda, SummaryMode};
use crate::episode::GeneratorConfig;
use crate::nn::{HyperpriorKind, VInit};

use super::TrainError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaOptimizer {
    /// `theta <- theta - beta_theta * grad`.
    #[default]
    Sgd,
    /// Adam with step size `beta_theta`, moments (0.9, 0.999).
    Adam,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Number of epoch-wise base-learners `M`.
    pub epochs: usize,
    pub mode: SummaryMode,
    pub hyperprior: HyperpriorKind,
    pub hyperprior_hidden: usize,
    pub base_hidden: usize,
    pub meta_batch_size: usize,
    pub meta_iterations: usize,
    pub eval_every: usize,
    pub eval_episode_count: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub beta_theta: f64,
    pub theta_optimizer: ThetaOptimizer,
    pub lambda1: f64,
    pub lambda2: f64,
    pub fixed_alpha: f64,
    /// Initial `alpha'_m`.
    pub alpha_init: f64,
    pub v_init: VInit,
    pub constrained: bool,
    pub combine: Combine,
    pub ablation: Ablation,
    /// Frozen per-epoch values for the `optimal` modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_path: Option<PathBuf>,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_query: 15,
            epochs: 3,
            mode: SummaryMode::Transductive,
            hyperprior: HyperpriorKind::Lstm,
            hyperprior_hidden: 16,
            base_hidden: 32,
            meta_batch_size: 4,
            meta_iterations: 2000,
            eval_every: 100,
            eval_episode_count: 200,
            beta1: 1e-3,
            beta2: 1e-3,
            beta_theta: 1e-3,
            theta_optimizer: ThetaOptimizer::Sgd,
            lambda1: 1e-4,
            lambda2: 1e-4,
            fixed_alpha: 1e-3,
            alpha_init: 1e-3,
            v_init: VInit::Uniform,
            constrained: false,
            combine: Combine::Logits,
            ablation: Ablation::E3BM,
            frozen_path: None,
            seed: 2020,
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    /// The default with hyperprior meta rates of `1e-6` instead of `1e-3`.
    /// Suited to long runs; at 2000 iterations the hyperprior learners
    /// barely move.
    pub fn slow_hyperprior() -> Self {
        Self {
            beta1: 1e-6,
            beta2: 1e-6,
            ..Self::default()
        }
    }

    /// Base-learner layer widths.
    pub fn dims(&self) -> Vec<usize> {
        vec![self.generator.dim, self.base_hidden, self.n_way]
    }

    /// Checks every field; the error names the offending one.
    pub fn validate(&self) -> Result<(), TrainError> {
        let field = |name: &'static str, msg: String| Err(TrainError::Config { field: name, message: msg });
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_query", self.q_query),
            ("epochs", self.epochs),
            ("hyperprior_hidden", self.hyperprior_hidden),
            ("base_hidden", self.base_hidden),
            ("meta_batch_size", self.meta_batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return field(name, "must be at least 1".into());
            }
        }
        if self.n_way < 2 {
            return field("n_way", "must be at least 2".into());
        }
        if self.epochs > 100 {
            return field("epochs", format!("at most 100 supported, got {}", self.epochs));
        }
        if self.eval_episode_count < 2 {
            return field("eval_episode_count", "must be at least 2".into());
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta_theta", self.beta_theta),
            ("fixed_alpha", self.fixed_alpha),
            ("alpha_init", self.alpha_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return field(name, format!("must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v > 0.0 && v < 1.0) {
                return field(name, format!("must lie strictly between 0 and 1, got {v}"));
            }
        }
        let g = &self.generator;
        if g.dim == 0 {
            return field("generator.dim", "must be at least 1".into());
        }
        if g.kind == crate::episode::GeneratorKind::GaussianClusters {
            for (name, pool) in [
                ("generator.train_classes", g.train_classes),
                ("generator.val_classes", g.val_classes),
                ("generator.test_classes", g.test_classes),
            ] {
                if pool < self.n_way {
                    return field(name, format!("pool of {pool} classes is smaller than n_way = {}", self.n_way));
                }
            }
            if !(g.separation > 0.0 && g.separation.is_finite()) {
                return field("generator.separation", "must be positive".into());
            }
            if !(g.noise_sigma >= 0.0 && g.noise_sigma.is_finite()) {
                return field("generator.noise_sigma", "must be non-negative".into());
            }
        } else if g.path.is_none() {
            return field("generator.path", "required for the file generator".into());
        }
        Ok(())
    }

    /// Per-episode engine settings of this run.
    pub fn inner(&self, frozen: Option<crate::engine::FrozenValues>) -> Result<InnerConfig<f64>, TrainError> {
        let lambda = |name, x| {
            Lambda::new(x).map_err(|e| TrainError::Config {
                field: name,
                message: e.to_string(),
            })
        };
        Ok(InnerConfig {
            epochs: self.epochs,
            mode: self.mode,
            lambda_alpha: lambda("lambda1", self.lambda1)?,
            lambda_v: lambda("lambda2", self.lambda2)?,
            fixed_alpha: self.fixed_alpha,
            constrained: self.constrained,
            combine: self.combine,
            ablation: self.ablation,
            frozen,
            keep_scores: false,
        })
    }
}
