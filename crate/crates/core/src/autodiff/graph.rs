use std::sync::Arc;

use crate::scalar::Scalar;

use super::tensor::matmul_kernel;
use super::{AutodiffError, Tensor};

/// Dense index into a [`Graph`]'s node arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    /// `op(a) . op(b)`, each side optionally transposed.
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(T),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// Mean over one axis (kept as size 1) or over everything (scalar).
    Mean(Option<usize>),
    Sum(Option<usize>),
    Concat(usize),
    /// Row-wise softmax.
    Softmax,
    /// Mean softmax cross-entropy of rows against integer labels.
    SoftmaxCrossEntropy(Arc<[usize]>),
    /// Row-wise argmax as a `[m, 1]` column of indices. Never differentiable.
    Argmax,
    StopGradient,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::Argmax => "argmax",
            Op::StopGradient => "stop_gradient",
        }
    }

    fn differentiable(&self) -> bool {
        !matches!(self, Op::Argmax | Op::StopGradient)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<NodeId>,
    pub(crate) requires_grad: bool,
}

/// Append-only computation graph. One graph per episode; drop it after the
/// meta step.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    rng_seed: u64,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng_seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: Vec<NodeId>) -> NodeId {
        let requires_grad =
            op.differentiable() && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: T) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let inner_a = if ta { sa[0] } else { sa[1] };
        let inner_b = if tb { sb[1] } else { sb[0] };
        if inner_a != inner_b {
            return Err(mismatch());
        }
        let value = matmul_kernel(self.value(a), self.value(b), ta, tb);
        Ok(self.push(value, Op::MatMul { ta, tb }, vec![a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op.name(), va.shape(), vb.shape())?;
        let n: usize = out_shape.iter().product();
        let (ia, ib) = (indexer(va.shape(), &out_shape), indexer(vb.shape(), &out_shape));
        let data = (0..n)
            .map(|i| f(va.data()[ia(i)], vb.data()[ib(i)]))
            .collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, op, vec![a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::Scale(c), vec![a]))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Tanh, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Sigmoid, |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = self.value(a).map(|x| x.exp());
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .zip(value.data())
            .find(|(_, y)| !y.is_finite())
        {
            return Err(AutodiffError::Domain {
                op: "exp",
                detail: format!("exp({}) is not finite", bad.0),
            });
        }
        Ok(self.push(value, Op::Exp, vec![a]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        if let Some(x) = self
            .value(a)
            .data()
            .iter()
            .find(|x| !(**x > T::zero() && x.is_finite()))
        {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("log({x}) is undefined or infinite"),
            });
        }
        let value = self.value(a).map(|x| x.ln());
        Ok(self.push(value, Op::Log, vec![a]))
    }

    fn unary(
        &mut self,
        a: NodeId,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = self.value(a).map(f);
        Ok(self.push(value, op, vec![a]))
    }

    /// Mean over `axis` (kept with size 1) or, for `None`, over all elements.
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, AutodiffError> {
        let (value, count) = self.reduce(a, axis, "mean")?;
        let inv = T::one() / T::of(count as f64);
        Ok(self.push(value.map(|x| x * inv), Op::Mean(axis), vec![a]))
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, AutodiffError> {
        let (value, _) = self.reduce(a, axis, "sum")?;
        Ok(self.push(value, Op::Sum(axis), vec![a]))
    }

    fn reduce(
        &self,
        a: NodeId,
        axis: Option<usize>,
        op: &'static str,
    ) -> Result<(Tensor<T>, usize), AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        match axis {
            None => Ok((Tensor::scalar(v.sum()), v.len())),
            Some(ax) => {
                if v.rank() != 2 || ax > 1 {
                    return Err(AutodiffError::BadRank {
                        op,
                        shape: v.shape().to_vec(),
                    });
                }
                let (m, n) = (v.rows(), v.cols());
                if ax == 0 {
                    let data = (0..n)
                        .map(|j| (0..m).map(|i| v.get(i, j)).sum())
                        .collect();
                    Ok((Tensor::new(vec![1, n], data)?, m))
                } else {
                    let data = (0..m).map(|i| v.row_slice(i).iter().copied().sum()).collect();
                    Ok((Tensor::new(vec![m, 1], data)?, n))
                }
            }
        }
    }

    /// Concatenate rank-2 nodes along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::BadRank {
            op: "concat",
            shape: Vec::new(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if base.len() != 2 || axis > 1 {
            return Err(AutodiffError::BadRank {
                op: "concat",
                shape: base,
            });
        }
        let keep = 1 - axis;
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != 2 || s[keep] != base[keep] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let value = if axis == 0 {
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::new(vec![total, base[1]], data)?
        } else {
            let mut data = Vec::with_capacity(total * base[0]);
            for r in 0..base[0] {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::new(vec![base[0], total], data)?
        };
        Ok(self.push(value, Op::Concat(axis), parts.to_vec()))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "softmax",
                shape: v.shape().to_vec(),
            });
        }
        let value = softmax_rows(v);
        Ok(self.push(value, Op::Softmax, vec![a]))
    }

    /// Mean over rows of `logsumexp(z_i) - z_i[label_i]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        const OP: &str = "softmax_cross_entropy";
        self.check(logits)?;
        let v = self.value(logits);
        if v.rank() != 2 || v.rows() != labels.len() || labels.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= v.cols()) {
            return Err(AutodiffError::Label {
                op: OP,
                label,
                classes: v.cols(),
            });
        }
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = v.row_slice(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total = total + (lse - row[y]);
        }
        let loss = total / T::of(labels.len() as f64);
        if !loss.is_finite() {
            return Err(AutodiffError::Domain {
                op: OP,
                detail: "non-finite logits".into(),
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(labels.into()),
            vec![logits],
        ))
    }

    /// Row-wise argmax (ties to the lowest index) as a detached `[m, 1]` node.
    pub fn argmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(AutodiffError::BadRank {
                op: "argmax",
                shape: v.shape().to_vec(),
            });
        }
        let idx: Vec<T> = v.argmax_rows().into_iter().map(|i| T::of(i as f64)).collect();
        let value = Tensor::new(vec![idx.len(), 1], idx)?;
        Ok(self.push(value, Op::Argmax, vec![a]))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let value = self.value(a).clone();
        Ok(self.push(value, Op::StopGradient, vec![a]))
    }
}

pub(crate) fn softmax_rows<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let n = v.cols();
    let mut data = Vec::with_capacity(v.len());
    for r in 0..v.rows() {
        let row = v.row_slice(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let s: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / s));
    }
    Tensor::new(vec![v.rows(), n], data).expect("softmax keeps shape")
}

fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, AutodiffError> {
    let ok = |s: &[usize]| s.is_empty() || s.len() == 2;
    if ok(a) && ok(b) {
        if a == b || b.is_empty() {
            return Ok(a.to_vec());
        }
        if a.is_empty() {
            return Ok(b.to_vec());
        }
        if b[0] == 1 && a[1] == b[1] {
            return Ok(a.to_vec());
        }
        if a[0] == 1 && a[1] == b[1] {
            return Ok(b.to_vec());
        }
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Maps a flat output index to the operand's flat index under broadcasting.
fn indexer(operand: &[usize], out: &[usize]) -> impl Fn(usize) -> usize {
    let mode = if operand == out {
        0
    } else if operand.is_empty() {
        1
    } else {
        2
    };
    let cols = out.get(1).copied().unwrap_or(1);
    move |i| match mode {
        0 => i,
        1 => 0,
        _ => i % cols,
    }
}
