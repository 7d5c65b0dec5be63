//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its nodes in creation order,
//! which is already a topological order. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients in a fixed order, so results are
//! bit-reproducible. Every recorded value is checked for NaN/Inf.

use std::collections::BTreeMap;

use crate::conv::{self, Conv2dSpec, Geometry};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geometry: Geometry,
        cols: Option<Vec<T>>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `x ∘ w` with `w` broadcast over the batch.
    MulBroadcast(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Upsample(NodeId, usize),
    Concat(usize, Vec<NodeId>),
    SliceChannels(NodeId, usize),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the loss with respect to every requires-grad leaf.
#[derive(Clone, Debug)]
pub struct GradientSet<T: Element = f32> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Element> GradientSet<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// Recording of one forward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// A trainable leaf; [`Graph::backward`] returns its gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let (y, cols, geometry) = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        // Column matrices are only needed to form the weight gradient.
        let cols = if self.nodes[w.0].requires_grad { cols } else { None };
        self.push(
            "conv2d",
            y,
            Op::Conv2d {
                x,
                w,
                b,
                geometry,
                cols,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push("hadamard", v, Op::Mul(a, b), rg)
    }

    /// `x ∘ w` where `w` is `1×C×H×W` and is shared by every batch element.
    pub fn hadamard_broadcast(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let v = self.value(x).hadamard_broadcast(self.value(w))?;
        let rg = self.any_grad(&[x, w]);
        self.push("hadamard_broadcast", v, Op::MulBroadcast(x, w), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).sigmoid();
        let rg = self.any_grad(&[x]);
        self.push("sigmoid", v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).tanh();
        let rg = self.any_grad(&[x]);
        self.push("tanh", v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).relu();
        let rg = self.any_grad(&[x]);
        self.push("relu", v, Op::Relu(x), rg)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).upsample_nearest(factor)?;
        let rg = self.any_grad(&[x]);
        self.push("upsample_nearest", v, Op::Upsample(x, factor), rg)
    }

    /// Concatenation along the batch (0) or channel (1) axis.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(axis, &values)?;
        let rg = self.any_grad(parts);
        self.push("concat", v, Op::Concat(axis, parts.to_vec()), rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.concat(1, &[a, b])
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).slice_channels(start, len)?;
        let rg = self.any_grad(&[x]);
        self.push("slice_channels", v, Op::SliceChannels(x, start), rg)
    }

    /// Sum of all elements as a `1×1×1×1` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push("sum", v, Op::Sum(x), rg)
    }

    /// Mean over all `N·H·W` pixels of `−log softmax(logits)[target]`.
    ///
    /// `targets` holds one class index per pixel in `N×H×W` row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits);
        let [n, k, h, w] = x.dims();
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), x.dims()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::ClassOutOfRange { index: bad, classes: k });
        }
        let count = targets.len();
        if count == 0 {
            return Err(Error::Invalid("cross-entropy over zero pixels".into()));
        }
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        let data = x.data();
        for b in 0..n {
            let base = b * k * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let max = (0..k).map(|c| data[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (data[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / z;
                }
                let t = targets[b * plane + p];
                total += (max + z.ln() - data[at(t)]).as_f64();
            }
        }
        let loss = T::of(total / count as f64);
        let rg = self.any_grad(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            for (parent, g) in self.local_grads(node, &dy)? {
                if parent.0 >= id {
                    return Err(Error::UnknownNode(parent.0));
                }
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.insert(NodeId(id), g);
            }
        }
        // Leaves created after the loss cannot influence it.
        for (id, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.insert(NodeId(id), Tensor::zeros(node.value.dims()));
            }
        }
        Ok(GradientSet { grads: out })
    }

    /// Contributions of `dy` (gradient w.r.t. `node`) to each parent, in a fixed order.
    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geometry,
                cols,
            } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let grads = conv::backward(
                    geometry,
                    self.value(*x),
                    self.value(*w),
                    b.map(|b| self.value(b).dims()),
                    cols.as_deref(),
                    dy,
                    need,
                )?;
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, dy.hadamard(self.value(*b))?));
                }
                if rg(*b) {
                    out.push((*b, dy.hadamard(self.value(*a))?));
                }
            }
            Op::MulBroadcast(x, w) => {
                if rg(*x) {
                    out.push((*x, dy.hadamard_broadcast(self.value(*w))?));
                }
                if rg(*w) {
                    let prod = dy.hadamard(self.value(*x))?;
                    let wd = self.value(*w).dims();
                    let per: usize = wd.iter().product();
                    let mut acc = vec![T::zero(); per];
                    for chunk in prod.data().chunks_exact(per.max(1)) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    out.push((*w, Tensor::from_vec(wd, acc)?));
                }
            }
            Op::Sigmoid(x) => {
                let d = dy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s));
                out.push((*x, Tensor::from_vec(y.dims(), d.collect())?));
            }
            Op::Tanh(x) => {
                let d = dy.data().iter().zip(y.data()).map(|(&g, &t)| g * (T::one() - t * t));
                out.push((*x, Tensor::from_vec(y.dims(), d.collect())?));
            }
            Op::Relu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() });
                out.push((*x, Tensor::from_vec(y.dims(), d.collect())?));
            }
            Op::Upsample(x, factor) => {
                let [n, c, h, w] = self.value(*x).dims();
                let ow = w * factor;
                let mut dx = vec![T::zero(); n * c * h * w];
                let oplane = h * factor * ow;
                for (p, plane) in dx.chunks_exact_mut((h * w).max(1)).enumerate() {
                    let src = &dy.data()[p * oplane..(p + 1) * oplane];
                    for (i, &g) in src.iter().enumerate() {
                        let (oy, ox) = (i / ow, i % ow);
                        let at = (oy / factor) * w + ox / factor;
                        plane[at] = plane[at] + g;
                    }
                }
                out.push((*x, Tensor::from_vec([n, c, h, w], dx)?));
            }
            Op::Concat(axis, parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pd = self.value(p).dims();
                    let g = if *axis == 0 {
                        let per: usize = pd[1..].iter().product();
                        Tensor::from_vec(pd, dy.data()[offset * per..(offset + pd[0]) * per].to_vec())?
                    } else {
                        dy.slice_channels(offset, pd[1])?
                    };
                    offset += pd[*axis];
                    if rg(p) {
                        out.push((p, g));
                    }
                }
            }
            Op::SliceChannels(x, start) => {
                let xd = self.value(*x).dims();
                let [n, c, h, w] = xd;
                let len = y.dims()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for i in 0..n {
                    let dst = (i * c + start) * plane;
                    let src = i * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                out.push((*x, Tensor::from_vec(xd, dx)?));
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                out.push((*x, Tensor::full(self.value(*x).dims(), g)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let [_, k, h, w] = self.value(*logits).dims();
                let plane = h * w;
                let scale = dy.data()[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    let (b, p) = (i / plane, i % plane);
                    let at = (b * k + t) * plane + p;
                    d[at] = d[at] - scale;
                }
                out.push((*logits, Tensor::from_vec(self.value(*logits).dims(), d)?));
            }
        }
        Ok(out)
    }
}
