//! Reverse-mode automatic differentiation over a per-forward-pass graph.
//!
//! A [`Graph`] is built fresh for every forward pass and discarded afterwards;
//! nodes are append-only, every input id strictly precedes its consumer, and a
//! single backward sweep visits each node at most once. Leaves are the
//! differentiation roots; gradients are exact reverse-mode.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// inputs: [input, weights, bias]
    Dense,
    /// inputs: [input, kernels]
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    Add,
    Sub,
    MulScalar(f64),
    Flatten,
    AvgPoolAll,
    BceWithLogit { target: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable binary cross-entropy from a logit:
/// max(z,0) - z*t + ln(1 + exp(-|z|)).
pub fn bce_from_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    /// Record a differentiation leaf. Cheap: tensor buffers are shared.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// out_i = bias_i + sum_j weights_ij * input_j
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let (n, wshape) = (x.numel(), w.shape().to_vec());
        if wshape.len() != 2 || wshape[1] != n || x.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "dense input/weights",
                left: x.shape().to_vec(),
                right: wshape,
            });
        }
        let m = wshape[0];
        if b.shape() != [m] {
            return Err(Error::ShapeMismatch {
                context: "dense weights/bias",
                left: wshape,
                right: b.shape().to_vec(),
            });
        }
        let xd = x.data();
        let mut out = b.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w.data()[i * n..(i + 1) * n];
            *o += dot(row, xd);
        }
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(Op::Dense, vec![input, weights, bias], value))
    }

    /// Valid (no padding) cross-correlation of [C,H,W] with kernels [K,C,kh,kw].
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let x = self.value(input);
        let k = self.value(kernels);
        let (xs, ks) = (x.shape().to_vec(), k.shape().to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                context: "conv2d input/kernels",
                left: xs,
                right: ks,
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (kn, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                context: "conv2d kernel larger than input",
                left: xs,
                right: ks,
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; kn * oh * ow];
        for ki in 0..kn {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            let xrow = (ci * h + oy * stride + u) * w + ox * stride;
                            let krow = ((ki * c + ci) * kh + u) * kw;
                            acc += dot(&kd[krow..krow + kw], &xd[xrow..xrow + kw]);
                        }
                    }
                    out[(ki * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = Tensor::new(vec![kn, oh, ow], out)?;
        Ok(self.push(Op::Conv2d { stride }, vec![input, kernels], value))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(|v| v.max(0.0))?;
        Ok(self.push(Op::Relu, vec![input], value))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let value = self.value(input).map(sigmoid)?;
        Ok(self.push(Op::Sigmoid, vec![input], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    pub fn mul_scalar(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("mul_scalar factor"));
        }
        let value = self.value(input).scale(factor)?;
        Ok(self.push(Op::MulScalar(factor), vec![input], value))
    }

    /// Reshape to rank 1, preserving the row-major order.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let value = Tensor::new(vec![x.numel()], x.data().to_vec())?;
        Ok(self.push(Op::Flatten, vec![input], value))
    }

    /// Arithmetic mean over all entries; gradient is 1/N per entry.
    pub fn avg_pool_all(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::EmptyInput("avg_pool_all"));
        }
        let value = Tensor::scalar(x.mean())?;
        Ok(self.push(Op::AvgPoolAll, vec![input], value))
    }

    /// Binary cross-entropy of a scalar logit against a {0,1} target, in the
    /// stable log-sum-exp form. d(loss)/d(logit) = sigmoid(logit) - target.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: u8) -> Result<NodeId> {
        if target > 1 {
            return Err(Error::InvalidArgument(format!(
                "bce target must be 0 or 1, got {target}"
            )));
        }
        let z = self.value(logit).scalar_value()?;
        let value = Tensor::scalar(bce_from_logit(z, f64::from(target)))?;
        Ok(self.push(
            Op::BceWithLogit {
                target: f64::from(target),
            },
            vec![logit],
            value,
        ))
    }

    /// Exact reverse-mode gradients of a scalar loss with respect to the
    /// requested nodes. Nodes the loss does not depend on map to zero tensors.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<HashMap<NodeId, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch {
                context: "backward loss must be scalar",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let requested: std::collections::HashSet<usize> = wrt.iter().map(|id| id.0).collect();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Keep the gradient alive if this interior node (e.g. a logit) was
            // itself requested; otherwise hand the buffer over.
            let taken = if requested.contains(&id) {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(g) = taken else { continue };
            match node.op {
                Op::Leaf => unreachable!("leaves skipped above"),
                Op::Dense => {
                    let (input, weights) = (node.inputs[0], node.inputs[1]);
                    let x = self.value(input).data();
                    let w = self.value(weights).data();
                    let n = x.len();
                    {
                        let gi = slot(&mut grads, input.0, n);
                        for (i, &gv) in g.iter().enumerate() {
                            let row = &w[i * n..(i + 1) * n];
                            for (dst, &wv) in gi.iter_mut().zip(row) {
                                *dst += gv * wv;
                            }
                        }
                    }
                    {
                        let gw = slot(&mut grads, weights.0, w.len());
                        for (i, &gv) in g.iter().enumerate() {
                            let row = &mut gw[i * n..(i + 1) * n];
                            for (dst, &xv) in row.iter_mut().zip(x) {
                                *dst += gv * xv;
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, node.inputs[2].0, g.len());
                        for (dst, &gv) in gb.iter_mut().zip(&g) {
                            *dst += gv;
                        }
                    }
                }
                Op::Conv2d { stride } => {
                    let (input, kernels) = (node.inputs[0], node.inputs[1]);
                    let xs = self.value(input).shape().to_vec();
                    let ks = self.value(kernels).shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (kn, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
                    let xd = self.value(input).data();
                    let kd = self.value(kernels).data();
                    let numel_x = xd.len();
                    let numel_k = kd.len();
                    {
                        let gi = slot(&mut grads, input.0, numel_x);
                        for ki in 0..kn {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[(ki * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for u in 0..kh {
                                            let xrow =
                                                (ci * h + oy * stride + u) * w + ox * stride;
                                            let krow = ((ki * c + ci) * kh + u) * kw;
                                            for v in 0..kw {
                                                gi[xrow + v] += gv * kd[krow + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gk = slot(&mut grads, kernels.0, numel_k);
                        for ki in 0..kn {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[(ki * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for u in 0..kh {
                                            let xrow =
                                                (ci * h + oy * stride + u) * w + ox * stride;
                                            let krow = ((ki * c + ci) * kh + u) * kw;
                                            for v in 0..kw {
                                                gk[krow + v] += gv * xd[xrow + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu => {
                    let input = node.inputs[0];
                    let x = self.value(input).data();
                    let gi = slot(&mut grads, input.0, x.len());
                    for ((dst, &gv), &xv) in gi.iter_mut().zip(&g).zip(x) {
                        if xv > 0.0 {
                            *dst += gv;
                        }
                    }
                }
                Op::Sigmoid => {
                    let input = node.inputs[0];
                    let s = node.value.data();
                    let gi = slot(&mut grads, input.0, s.len());
                    for ((dst, &gv), &sv) in gi.iter_mut().zip(&g).zip(s) {
                        *dst += gv * sv * (1.0 - sv);
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        let gi = slot(&mut grads, inp.0, g.len());
                        for (dst, &gv) in gi.iter_mut().zip(&g) {
                            *dst += gv;
                        }
                    }
                }
                Op::Sub => {
                    let ga = slot(&mut grads, node.inputs[0].0, g.len());
                    for (dst, &gv) in ga.iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    let gb = slot(&mut grads, node.inputs[1].0, g.len());
                    for (dst, &gv) in gb.iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
                Op::MulScalar(factor) => {
                    let gi = slot(&mut grads, node.inputs[0].0, g.len());
                    for (dst, &gv) in gi.iter_mut().zip(&g) {
                        *dst += gv * factor;
                    }
                }
                Op::Flatten => {
                    let gi = slot(&mut grads, node.inputs[0].0, g.len());
                    for (dst, &gv) in gi.iter_mut().zip(&g) {
                        *dst += gv;
                    }
                }
                Op::AvgPoolAll => {
                    let input = node.inputs[0];
                    let n = self.value(input).numel();
                    let share = g[0] / n as f64;
                    let gi = slot(&mut grads, input.0, n);
                    for dst in gi.iter_mut() {
                        *dst += share;
                    }
                }
                Op::BceWithLogit { target } => {
                    let input = node.inputs[0];
                    let z = self.value(input).data()[0];
                    let gi = slot(&mut grads, input.0, 1);
                    gi[0] += g[0] * (sigmoid(z) - target);
                }
            }
        }

        let mut out = HashMap::with_capacity(wrt.len());
        for &id in wrt {
            let shape = self.value(id).shape().to_vec();
            let tensor = match grads[id.0].take() {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(shape),
            };
            out.insert(id, tensor);
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}
