use crate::scalar::Scalar;

use super::graph::Op;
use super::{AutodiffError, Graph, NodeId, Tensor};

impl<T: Scalar> Graph<T> {
    /// Gradients of a scalar `loss` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the returned nodes stay attached to the graph and
    /// can be differentiated again; otherwise they are detached constants and
    /// the intermediate backward nodes are discarded. A `wrt` node the loss
    /// does not depend on gets an all-zero gradient.
    pub fn grad(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>, AutodiffError> {
        if loss.0 >= self.len() {
            return Err(AutodiffError::UnknownNode(loss.0));
        }
        if !self.shape(loss).is_empty() {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        for &w in wrt {
            if w.0 >= self.len() {
                return Err(AutodiffError::UnknownNode(w.0));
            }
            if !self.requires_grad(w) {
                return Err(AutodiffError::NoGrad(w.0));
            }
        }

        let start_len = self.len();
        let n = loss.0 + 1;
        // Nodes through which some wrt node influences the loss.
        let mut reaches = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                reaches[w.0] = true;
            }
        }
        for i in 0..n {
            if !reaches[i] && self.nodes[i].requires_grad {
                reaches[i] = self.nodes[i].parents.iter().any(|p| reaches[p.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        if reaches[loss.0] {
            grads[loss.0] = Some(self.scalar(T::one()));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !reaches[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            let wanted: Vec<bool> = parents.iter().map(|p| reaches[p.0]).collect();
            let contributions = self.vjp(NodeId(i), g, &wanted)?;
            for (p, gp) in parents.into_iter().zip(contributions) {
                let Some(gp) = gp else { continue };
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, gp)?,
                    None => gp,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    out.push(self.constant(zeros));
                }
            }
        }
        if create_graph {
            return Ok(out);
        }
        let values: Vec<Tensor<T>> = out.iter().map(|&g| self.value(g).clone()).collect();
        self.truncate(start_len);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// Differentiates a scalar functional of first-order gradients.
    ///
    /// Computes `g = d loss / d inner` with graph retention, forms
    /// `functional(g)` and returns its gradient with respect to `outer`.
    pub fn second_order_grad<F>(
        &mut self,
        loss: NodeId,
        inner: &[NodeId],
        outer: &[NodeId],
        functional: F,
    ) -> Result<Vec<NodeId>, AutodiffError>
    where
        F: FnOnce(&mut Self, &[NodeId]) -> Result<NodeId, AutodiffError>,
    {
        let first = self.grad(loss, inner, true)?;
        let f = functional(self, &first)?;
        self.grad(f, outer, false)
    }

    /// Sums a broadcast gradient back down to `shape`.
    fn reduce_to(&mut self, g: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let gs = self.shape(g).to_vec();
        if gs == shape {
            Ok(g)
        } else if shape.is_empty() {
            self.sum(g, None)
        } else {
            self.sum(g, Some(0))
        }
    }

    fn expand_like(&mut self, g: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let zeros = self.constant(Tensor::zeros(shape));
        self.add(zeros, g)
    }

    /// Vector-Jacobian product of node `id` for each parent flagged in `wanted`.
    fn vjp(
        &mut self,
        id: NodeId,
        g: NodeId,
        wanted: &[bool],
    ) -> Result<Vec<Option<NodeId>>, AutodiffError> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let parents = node.parents.clone();
        let want = |k: usize| wanted.get(k).copied().unwrap_or(false);
        let one_parent = |g: Option<NodeId>| vec![g];

        Ok(match op {
            Op::Leaf | Op::Argmax | Op::StopGradient => vec![None; parents.len()],
            Op::MatMul { ta, tb } => {
                let (a, b) = (parents[0], parents[1]);
                let ga = if want(0) {
                    Some(if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    })
                } else {
                    None
                };
                let gb = if want(1) {
                    Some(if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Add | Op::Sub => {
                let mut out = Vec::with_capacity(2);
                for (k, &p) in parents.iter().enumerate() {
                    if !want(k) {
                        out.push(None);
                        continue;
                    }
                    let shape = self.shape(p).to_vec();
                    let mut gp = self.reduce_to(g, &shape)?;
                    if k == 1 && matches!(op, Op::Sub) {
                        gp = self.scale(gp, -T::one())?;
                    }
                    out.push(Some(gp));
                }
                out
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let mut out = vec![None, None];
                for (k, (this, other)) in [(a, b), (b, a)].into_iter().enumerate() {
                    if want(k) {
                        let prod = self.mul(g, other)?;
                        let shape = self.shape(this).to_vec();
                        out[k] = Some(self.reduce_to(prod, &shape)?);
                    }
                }
                out
            }
            Op::Scale(c) => one_parent(Some(self.scale(g, c)?)),
            Op::Tanh => {
                let y2 = self.mul(id, id)?;
                let one = self.scalar(T::one());
                let d = self.sub(one, y2)?;
                one_parent(Some(self.mul(g, d)?))
            }
            Op::Sigmoid => {
                let one = self.scalar(T::one());
                let rest = self.sub(one, id)?;
                let d = self.mul(id, rest)?;
                one_parent(Some(self.mul(g, d)?))
            }
            Op::Relu => {
                let mask = self
                    .value(parents[0])
                    .map(|x| if x > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                one_parent(Some(self.mul(g, mask)?))
            }
            Op::Exp => one_parent(Some(self.mul(g, id)?)),
            Op::Log => {
                // 1/x = exp(-log x), and `id` already holds log x.
                let neg = self.scale(id, -T::one())?;
                let recip = self.exp(neg)?;
                one_parent(Some(self.mul(g, recip)?))
            }
            Op::Sum(axis) | Op::Mean(axis) => {
                let shape = self.shape(parents[0]).to_vec();
                let expanded = match axis {
                    None | Some(0) => self.expand_like(g, &shape)?,
                    Some(_) => {
                        let ones = self.constant(Tensor::ones(&[1, shape[1]]));
                        self.matmul(g, ones)?
                    }
                };
                let gp = if let Op::Mean(_) = op {
                    let count = match axis {
                        None => shape.iter().product::<usize>(),
                        Some(ax) => shape[ax],
                    };
                    self.scale(expanded, T::one() / T::of(count as f64))?
                } else {
                    expanded
                };
                one_parent(Some(gp))
            }
            Op::Concat(axis) => {
                let total: usize = parents.iter().map(|&p| self.shape(p)[axis]).sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parents.len());
                for (k, &p) in parents.iter().enumerate() {
                    let width = self.shape(p)[axis];
                    if want(k) {
                        // Selection matrix picking this part's slice.
                        let mut sel = Tensor::zeros(&[total, width]);
                        for j in 0..width {
                            sel.data_mut()[(offset + j) * width + j] = T::one();
                        }
                        let sel = self.constant(sel);
                        out.push(Some(if axis == 1 {
                            self.matmul(g, sel)?
                        } else {
                            self.matmul_t(sel, g, true, false)?
                        }));
                    } else {
                        out.push(None);
                    }
                    offset += width;
                }
                out
            }
            Op::Softmax => {
                // dx = y*g - y*((y*g) . J), J the all-ones matrix (row sums).
                let n = self.shape(id)[1];
                let yg = self.mul(id, g)?;
                let ones = self.constant(Tensor::ones(&[n, n]));
                let rowsum = self.matmul(yg, ones)?;
                let corr = self.mul(id, rowsum)?;
                one_parent(Some(self.sub(yg, corr)?))
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let logits = parents[0];
                let (m, n) = (self.shape(logits)[0], self.shape(logits)[1]);
                let mut onehot = Tensor::zeros(&[m, n]);
                for (r, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[r * n + y] = T::one();
                }
                let onehot = self.constant(onehot);
                let probs = self.softmax(logits)?;
                let diff = self.sub(probs, onehot)?;
                let scaled = self.mul(diff, g)?;
                one_parent(Some(self.scale(scaled, T::one() / T::of(m as f64))?))
            }
        })
    }
}
