use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

use super::{xavier_uniform, NnError, ParamSet};

/// Affine layer: `x . weight + bias`, weight `[d_in, d_out]`, bias `[1, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier_uniform(d_in, d_out, rng),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Base-learner parameters: tanh between layers, identity at the output.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> BaseParams<T> {
    /// `dims = [d, hidden..., n_way]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Rebuilds from tensors in `tensors()` order.
    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Result<Self, NnError> {
        if !tensors.len().is_multiple_of(2) || tensors.is_empty() {
            return Err(NnError::Dim {
                what: "base params tensor count",
                expected: vec![2],
                got: vec![tensors.len()],
            });
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Dense { weight, bias });
        }
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].d_in()];
        dims.extend(self.layers.iter().map(Dense::d_out));
        dims
    }

    /// Checks that layer dimensions chain.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut prev: Option<usize> = None;
        for layer in &self.layers {
            let (wi, wo) = (layer.weight.shape(), layer.bias.shape());
            if wi.len() != 2 || wo != [1, wi[1]] {
                return Err(NnError::Dim {
                    what: "dense layer",
                    expected: vec![1, wi.get(1).copied().unwrap_or(0)],
                    got: wo.to_vec(),
                });
            }
            if let Some(p) = prev {
                if p != wi[0] {
                    return Err(NnError::Dim {
                        what: "layer chaining",
                        expected: vec![p],
                        got: vec![wi[0]],
                    });
                }
            }
            prev = Some(wi[1]);
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for BaseParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Logits `[B, N]` of a feature batch `x: [B, d]` under bound base params
/// (`[w1, b1, w2, b2, ...]`).
pub fn mlp_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    params: &[NodeId],
) -> Result<NodeId, NnError> {
    if params.is_empty() || !params.len().is_multiple_of(2) {
        return Err(NnError::Dim {
            what: "mlp parameter list",
            expected: vec![2],
            got: vec![params.len()],
        });
    }
    let x_shape = g.shape(x).to_vec();
    let d_in = g.shape(params[0]).first().copied().unwrap_or(0);
    if x_shape.len() != 2 || x_shape[1] != d_in {
        return Err(NnError::Dim {
            what: "mlp input",
            expected: vec![x_shape.first().copied().unwrap_or(0), d_in],
            got: x_shape,
        });
    }
    let layers = params.len() / 2;
    let mut h = x;
    for (i, pair) in params.chunks(2).enumerate() {
        let z = g.matmul(h, pair[0])?;
        h = g.add(z, pair[1])?;
        if i + 1 < layers {
            h = g.tanh(h)?;
        }
    }
    Ok(h)
}
