use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

use super::{xavier_uniform, Dense, NnError, ParamSet};

/// Parameters of one LSTM gate: `x . w_x + h . w_h + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGate<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmGate<T> {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[input, hidden]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[1, hidden]),
        }
    }

    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: xavier_uniform(input, hidden, rng),
            w_h: xavier_uniform(hidden, hidden, rng),
            bias: Tensor::zeros(&[1, hidden]),
        }
    }
}

/// Gates in input, forget, candidate, output order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<T> {
    pub gates: [LstmGate<T>; 4],
}

impl<T: Scalar> LstmCell<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            gates: std::array::from_fn(|_| LstmGate::zeros(input, hidden)),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            gates: std::array::from_fn(|_| LstmGate::init(input, hidden, rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gates[0].w_x.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.gates[0].w_h.shape()[0]
    }
}

/// LSTM hyperprior learner: one cell shared by all epochs, a linear readout
/// to `(delta_alpha, delta_v)`, and learned initial states.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmHyperprior<T> {
    pub cell: LstmCell<T>,
    pub readout: Dense<T>,
    pub h0: Tensor<T>,
    pub c0: Tensor<T>,
}

impl<T: Scalar> LstmHyperprior<T> {
    pub const TENSORS: usize = 16;

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            cell: LstmCell::zeros(input, hidden),
            readout: Dense::zeros(hidden, 2),
            h0: Tensor::zeros(&[1, hidden]),
            c0: Tensor::zeros(&[1, hidden]),
        }
    }

    /// Random cell, zero readout weights, readout bias `readout_bias`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, readout_bias: [T; 2], rng: &mut R) -> Self {
        let mut readout = Dense::zeros(hidden, 2);
        readout.bias = Tensor::row(&readout_bias);
        Self {
            cell: LstmCell::init(input, hidden, rng),
            readout,
            h0: Tensor::zeros(&[1, hidden]),
            c0: Tensor::zeros(&[1, hidden]),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Result<Self, NnError> {
        if tensors.len() != Self::TENSORS {
            return Err(NnError::Dim {
                what: "lstm hyperprior tensor count",
                expected: vec![Self::TENSORS],
                got: vec![tensors.len()],
            });
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted above");
        let gates = std::array::from_fn(|_| LstmGate {
            w_x: next(),
            w_h: next(),
            bias: next(),
        });
        let readout = Dense {
            weight: next(),
            bias: next(),
        };
        let h0 = next();
        let c0 = next();
        let out = Self {
            cell: LstmCell { gates },
            readout,
            h0,
            c0,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let (d, h) = (self.cell.input_dim(), self.cell.hidden_dim());
        let expect = |what, t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(NnError::Dim {
                    what,
                    expected: shape.to_vec(),
                    got: t.shape().to_vec(),
                })
            }
        };
        for gate in &self.cell.gates {
            expect("lstm w_x", &gate.w_x, &[d, h])?;
            expect("lstm w_h", &gate.w_h, &[h, h])?;
            expect("lstm bias", &gate.bias, &[1, h])?;
        }
        expect("lstm readout weight", &self.readout.weight, &[h, 2])?;
        expect("lstm readout bias", &self.readout.bias, &[1, 2])?;
        expect("lstm h0", &self.h0, &[1, h])?;
        expect("lstm c0", &self.c0, &[1, h])
    }
}

impl<T: Scalar> ParamSet<T> for LstmHyperprior<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self
            .cell
            .gates
            .iter()
            .flat_map(|g| [&g.w_x, &g.w_h, &g.bias])
            .collect();
        out.extend([&self.readout.weight, &self.readout.bias, &self.h0, &self.c0]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .cell
            .gates
            .iter_mut()
            .flat_map(|g| [&mut g.w_x, &mut g.w_h, &mut g.bias])
            .collect();
        out.extend([
            &mut self.readout.weight,
            &mut self.readout.bias,
            &mut self.h0,
            &mut self.c0,
        ]);
        out
    }
}

/// Output of one LSTM hyperprior step.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub delta: NodeId,
    pub h: NodeId,
    pub c: NodeId,
}

/// One step of a bound LSTM hyperprior (node layout as in
/// [`LstmHyperprior`]'s `tensors()`): gates, state update, then readout.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    summary: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    params: &[NodeId],
) -> Result<LstmStep, NnError> {
    if params.len() != LstmHyperprior::<T>::TENSORS {
        return Err(NnError::Dim {
            what: "lstm parameter list",
            expected: vec![LstmHyperprior::<T>::TENSORS],
            got: vec![params.len()],
        });
    }
    let d_in = g.shape(params[0])[0];
    let hidden = g.shape(params[1])[0];
    let s = g.shape(summary).to_vec();
    if s != [1, d_in] {
        return Err(NnError::Dim {
            what: "lstm input",
            expected: vec![1, d_in],
            got: s,
        });
    }
    for state in [h_prev, c_prev] {
        let s = g.shape(state).to_vec();
        if s != [1, hidden] {
            return Err(NnError::Dim {
                what: "lstm state",
                expected: vec![1, hidden],
                got: s,
            });
        }
    }
    let mut pre = [summary; 4];
    for (k, slot) in pre.iter_mut().enumerate() {
        let p = &params[3 * k..3 * k + 3];
        let xs = g.matmul(summary, p[0])?;
        let hs = g.matmul(h_prev, p[1])?;
        let sum = g.add(xs, hs)?;
        *slot = g.add(sum, p[2])?;
    }
    let i = g.sigmoid(pre[0])?;
    let f = g.sigmoid(pre[1])?;
    let cand = g.tanh(pre[2])?;
    let o = g.sigmoid(pre[3])?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    let r = g.matmul(h, params[12])?;
    let delta = g.add(r, params[13])?;
    Ok(LstmStep { delta, h, c })
}
