use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

use super::{lstm_step, Dense, LstmHyperprior, NnError, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperpriorKind {
    Fc,
    Lstm,
}

impl fmt::Display for HyperpriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HyperpriorKind::Fc => "fc",
            HyperpriorKind::Lstm => "lstm",
        })
    }
}

impl FromStr for HyperpriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fc" => Ok(Self::Fc),
            "lstm" => Ok(Self::Lstm),
            other => Err(format!("unknown hyperprior kind `{other}`")),
        }
    }
}

/// Independent per-epoch linear heads; head `m` serves epoch `m` only.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHyperprior<T> {
    pub heads: Vec<Dense<T>>,
}

impl<T: Scalar> FcHyperprior<T> {
    pub fn zeros(input: usize, epochs: usize) -> Self {
        Self {
            heads: (0..epochs).map(|_| Dense::zeros(input, 2)).collect(),
        }
    }

    /// Zero weights; head `m` gets bias `bias(m)`.
    pub fn with_biases(input: usize, epochs: usize, bias: impl Fn(usize) -> [T; 2]) -> Self {
        Self {
            heads: (0..epochs)
                .map(|m| {
                    let mut head = Dense::zeros(input, 2);
                    head.bias = Tensor::row(&bias(m));
                    head
                })
                .collect(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.heads.len()
    }
}

impl<T: Scalar> ParamSet<T> for FcHyperprior<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.heads.iter().flat_map(|h| [&h.weight, &h.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.heads
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.bias])
            .collect()
    }
}

/// `summary . W_m + b_m` for the bound head `[W_m, b_m]`.
pub fn fc_head<T: Scalar>(
    g: &mut Graph<T>,
    summary: NodeId,
    head: [NodeId; 2],
) -> Result<NodeId, NnError> {
    let z = g.matmul(summary, head[0])?;
    Ok(g.add(z, head[1])?)
}

/// A hyperprior learner of either architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Hyperprior<T> {
    Fc(FcHyperprior<T>),
    Lstm(LstmHyperprior<T>),
}

impl<T: Scalar> Hyperprior<T> {
    /// Fresh learner whose output at initialization equals `bias(m)` for every
    /// input: readout weights start at zero, the LSTM cell is random.
    pub fn init<R: Rng + ?Sized>(
        kind: HyperpriorKind,
        input: usize,
        hidden: usize,
        epochs: usize,
        bias: impl Fn(usize) -> [T; 2],
        rng: &mut R,
    ) -> Self {
        match kind {
            HyperpriorKind::Fc => Hyperprior::Fc(FcHyperprior::with_biases(input, epochs, bias)),
            HyperpriorKind::Lstm => {
                // One readout serves every epoch, so it starts at the mean target.
                let mut mean = [T::zero(); 2];
                for m in 0..epochs {
                    let b = bias(m);
                    mean[0] = mean[0] + b[0];
                    mean[1] = mean[1] + b[1];
                }
                let n = T::of(epochs.max(1) as f64);
                Hyperprior::Lstm(LstmHyperprior::init(input, hidden, [mean[0] / n, mean[1] / n], rng))
            }
        }
    }

    pub fn kind(&self) -> HyperpriorKind {
        match self {
            Hyperprior::Fc(_) => HyperpriorKind::Fc,
            Hyperprior::Lstm(_) => HyperpriorKind::Lstm,
        }
    }

    pub fn from_tensors(kind: HyperpriorKind, tensors: Vec<Tensor<T>>) -> Result<Self, NnError> {
        match kind {
            HyperpriorKind::Lstm => Ok(Hyperprior::Lstm(LstmHyperprior::from_tensors(tensors)?)),
            HyperpriorKind::Fc => {
                if !tensors.len().is_multiple_of(2) {
                    return Err(NnError::Dim {
                        what: "fc hyperprior tensor count",
                        expected: vec![2],
                        got: vec![tensors.len()],
                    });
                }
                let mut it = tensors.into_iter();
                let mut heads = Vec::new();
                while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
                    if weight.rank() != 2 || weight.shape()[1] != 2 || bias.shape() != [1, 2] {
                        return Err(NnError::Dim {
                            what: "fc head",
                            expected: vec![2],
                            got: weight.shape().to_vec(),
                        });
                    }
                    heads.push(Dense { weight, bias });
                }
                Ok(Hyperprior::Fc(FcHyperprior { heads }))
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for Hyperprior<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Hyperprior::Fc(h) => h.tensors(),
            Hyperprior::Lstm(h) => h.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Hyperprior::Fc(h) => h.tensors_mut(),
            Hyperprior::Lstm(h) => h.tensors_mut(),
        }
    }
}

/// A bound hyperprior learner queried once per inner epoch. LSTM state
/// starts from the learned `h0`, `c0` and threads epoch to epoch.
#[derive(Clone, Debug)]
pub struct HyperpriorRun {
    kind: HyperpriorKind,
    params: Vec<NodeId>,
    state: Option<(NodeId, NodeId)>,
    next_epoch: usize,
}

impl HyperpriorRun {
    pub fn new(kind: HyperpriorKind, params: Vec<NodeId>) -> Self {
        let state = match kind {
            HyperpriorKind::Lstm if params.len() == 16 => Some((params[14], params[15])),
            _ => None,
        };
        Self {
            kind,
            params,
            state,
            next_epoch: 0,
        }
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// `[1, 2]` node `(delta_alpha, delta_v)` for the next epoch.
    pub fn step<T: Scalar>(&mut self, g: &mut Graph<T>, summary: NodeId) -> Result<NodeId, NnError> {
        let epoch = self.next_epoch;
        let delta = match self.kind {
            HyperpriorKind::Fc => {
                let epochs = self.params.len() / 2;
                if epoch >= epochs {
                    return Err(NnError::EpochOutOfRange { epoch, epochs });
                }
                fc_head(g, summary, [self.params[2 * epoch], self.params[2 * epoch + 1]])?
            }
            HyperpriorKind::Lstm => {
                let (h, c) = self.state.ok_or(NnError::Dim {
                    what: "lstm parameter list",
                    expected: vec![16],
                    got: vec![self.params.len()],
                })?;
                let out = lstm_step(g, summary, h, c, &self.params)?;
                self.state = Some((out.h, out.c));
                out.delta
            }
        };
        self.next_epoch += 1;
        Ok(delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VInit {
    /// Every `v'_m = 1 / M`.
    Uniform,
    /// `v' = [0, ..., 0, 1]`.
    LastOne,
}

/// Cross-episode prior values `alpha'_m` and `v'_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSchedule<T> {
    pub alpha: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> PriorSchedule<T> {
    pub fn init(epochs: usize, alpha: T, v_init: VInit) -> Self {
        let v = match v_init {
            VInit::Uniform => vec![T::one() / T::of(epochs as f64); epochs],
            VInit::LastOne => {
                let mut v = vec![T::zero(); epochs];
                if let Some(last) = v.last_mut() {
                    *last = T::one();
                }
                v
            }
        };
        Self {
            alpha: vec![alpha; epochs],
            v,
        }
    }

    pub fn epochs(&self) -> usize {
        self.alpha.len()
    }

    /// Binds every entry as a scalar leaf; returns `(alpha nodes, v nodes)`.
    pub fn bind(&self, g: &mut Graph<T>) -> (Vec<NodeId>, Vec<NodeId>) {
        let mut leaf = |x: T| g.param(Tensor::scalar(x));
        let a = self.alpha.iter().map(|&x| leaf(x)).collect();
        let v = self.v.iter().map(|&x| leaf(x)).collect();
        (a, v)
    }
}
