use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::autodiff::Tensor;
use crate::engine::{FrozenValues, MetaParams};
use crate::episode::mix_seed;
use crate::nn::{BaseParams, Hyperprior, HyperpriorKind, ParamSet, PriorSchedule};

use super::{RunConfig, TrainError};

pub const SNAPSHOT_FORMAT: &str = "e3bm-state";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Adam moments for `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

/// All meta-learned quantities of a run plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub params: MetaParams<f64>,
    pub config: RunConfig,
    pub iteration: u64,
    pub adam: Option<AdamState>,
    /// Values used by the `optimal` ablation modes.
    pub frozen: Option<FrozenValues>,
}

impl MetaState {
    /// Fresh state from a validated config. Reads the frozen-values file
    /// when the ablation needs it.
    pub fn init(config: &RunConfig) -> Result<Self, TrainError> {
        let frozen = match (&config.frozen_path, config.ablation.needs_frozen()) {
            (Some(path), true) => Some(super::load_frozen(path)?),
            _ => None,
        };
        Self::with_frozen(config, frozen)
    }

    /// Fresh state with the `optimal`-mode values given directly.
    pub fn with_frozen(config: &RunConfig, frozen: Option<FrozenValues>) -> Result<Self, TrainError> {
        config.validate()?;
        if config.ablation.needs_frozen() && frozen.is_none() {
            return Err(TrainError::Config {
                field: "frozen_path",
                message: format!("ablation {} needs frozen values", config.ablation),
            });
        }
        config.inner(frozen.clone())?.validate().map_err(|e| TrainError::Config {
            field: "frozen_path",
            message: e.to_string(),
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1]));
        let params = MetaParams::init(
            &config.dims(),
            config.hyperprior,
            config.hyperprior_hidden,
            config.epochs,
            config.alpha_init,
            config.v_init,
            &mut rng,
        );
        Ok(Self {
            params,
            config: config.clone(),
            iteration: 0,
            adam: None,
            frozen,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite()
    }

    pub fn to_json(&self) -> String {
        let snap = Snapshot::from_state(self);
        serde_json::to_string_pretty(&snap).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| TrainError::Snapshot(e.to_string()))?;
        snap.into_state()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_json(&text)
    }
}

fn sig17<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::{Error, SerializeSeq};
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for v in values {
        if !v.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {v}")));
        }
        let raw = RawValue::from_string(format!("{v:.16e}")).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    #[serde(serialize_with = "sig17")]
    values: Vec<f64>,
}

impl TensorRecord {
    fn of(t: &Tensor<f64>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    fn tensor(self) -> Result<Tensor<f64>, TrainError> {
        Tensor::new(self.shape, self.values).map_err(|e| TrainError::Snapshot(e.to_string()))
    }

    fn list(ts: Vec<&Tensor<f64>>) -> Vec<Self> {
        ts.into_iter().map(Self::of).collect()
    }

    fn tensors(records: Vec<Self>) -> Result<Vec<Tensor<f64>>, TrainError> {
        records.into_iter().map(Self::tensor).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperpriorRecord {
    kind: HyperpriorKind,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRecord {
    #[serde(serialize_with = "sig17")]
    alpha: Vec<f64>,
    #[serde(serialize_with = "sig17")]
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    step: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    format: String,
    version: u32,
    iteration: u64,
    config: RunConfig,
    theta: Vec<TensorRecord>,
    psi_a: HyperpriorRecord,
    psi_v: HyperpriorRecord,
    priors: PriorRecord,
    adam: Option<AdamRecord>,
    frozen: Option<PriorRecord>,
}

impl Snapshot {
    fn from_state(s: &MetaState) -> Self {
        let hp = |h: &Hyperprior<f64>| HyperpriorRecord {
            kind: h.kind(),
            tensors: TensorRecord::list(h.tensors()),
        };
        Self {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            iteration: s.iteration,
            config: s.config.clone(),
            theta: TensorRecord::list(s.params.theta.tensors()),
            psi_a: hp(&s.params.psi_a),
            psi_v: hp(&s.params.psi_v),
            priors: PriorRecord {
                alpha: s.params.priors.alpha.clone(),
                v: s.params.priors.v.clone(),
            },
            adam: s.adam.as_ref().map(|a| AdamRecord {
                step: a.step,
                m: TensorRecord::list(a.m.iter().collect()),
                v: TensorRecord::list(a.v.iter().collect()),
            }),
            frozen: s.frozen.as_ref().map(|f| PriorRecord {
                alpha: f.alpha.clone(),
                v: f.v.clone(),
            }),
        }
    }

    fn into_state(self) -> Result<MetaState, TrainError> {
        let bad = |m: String| Err(TrainError::Snapshot(m));
        if self.format != SNAPSHOT_FORMAT {
            return bad(format!("unexpected format `{}`", self.format));
        }
        if self.version != SNAPSHOT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        let snap_err = |e: crate::nn::NnError| TrainError::Snapshot(e.to_string());
        let theta = BaseParams::from_tensors(TensorRecord::tensors(self.theta)?).map_err(snap_err)?;
        let psi_a = Hyperprior::from_tensors(self.psi_a.kind, TensorRecord::tensors(self.psi_a.tensors)?).map_err(snap_err)?;
        let psi_v = Hyperprior::from_tensors(self.psi_v.kind, TensorRecord::tensors(self.psi_v.tensors)?).map_err(snap_err)?;
        let priors = PriorSchedule {
            alpha: self.priors.alpha,
            v: self.priors.v,
        };
        let cfg = self.config;
        if priors.alpha.len() != cfg.epochs || priors.v.len() != cfg.epochs {
            return bad(format!("prior schedule does not cover {} epochs", cfg.epochs));
        }
        if theta.dims() != cfg.dims() {
            return bad(format!("theta dims {:?} do not match the config {:?}", theta.dims(), cfg.dims()));
        }
        let adam = match self.adam {
            None => None,
            Some(a) => Some(AdamState {
                step: a.step,
                m: TensorRecord::tensors(a.m)?,
                v: TensorRecord::tensors(a.v)?,
            }),
        };
        let state = MetaState {
            params: MetaParams {
                theta,
                psi_a,
                psi_v,
                priors,
            },
            config: cfg,
            iteration: self.iteration,
            adam,
            frozen: self.frozen.map(|f| FrozenValues { alpha: f.alpha, v: f.v }),
        };
        if !state.is_finite() {
            return bad("non-finite parameter values".into());
        }
        Ok(state)
    }
}
