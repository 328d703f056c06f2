use std::collections::BTreeMap;

use super::kernels;
use super::{BnConfig, Mode, RunningStats, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpTag {
    Input,
    Param,
    Conv2d { stride: usize, padding: usize },
    Upsample { scale: usize },
    BatchNorm { mode: Mode },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Concat,
    /// Channels `start..start + len`.
    Slice { start: usize, len: usize },
    Sum,
    Mean,
    /// `scale * sum((a - b)^2)`.
    SquaredError { scale: f64 },
}

enum Saved<T: Scalar> {
    None,
    Bn { xhat: Tensor<T>, inv_std: Vec<T> },
}

struct Node<T: Scalar> {
    op: OpTag,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// A tape of tensor operations.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. Parameters are registered by name; registering
/// the same name twice returns the existing node so fan-out gradients are
/// summed.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter registered on
/// the graph. Parameters the loss does not depend on get zero tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Gradients {
            grads: iter.into_iter().collect(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum `other` into `self`, adding entries that are missing.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape(
                            "gradient accumulate",
                            format!("{name}: {} vs {}", acc.shape(), g.shape()),
                        ));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
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

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> OpTag {
        self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Take the value out of a node, leaving an empty tensor behind. Only
    /// useful once the tape will not be differentiated.
    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(Shape::new(0, 0, 0, 0)))
    }

    fn push(&mut self, op: OpTag, inputs: Vec<NodeId>, value: Tensor<T>, saved: Saved<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(OpTag::Input, Vec::new(), value, Saved::None)
    }

    /// A named trainable leaf. Re-registering a name returns the first node.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        if let Some(id) = self.params.get(name) {
            return *id;
        }
        self.nodes.push(Node {
            op: OpTag::Param,
            inputs: Vec::new(),
            value,
            requires_grad: true,
            saved: Saved::None,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Convolution; `bias` must have shape `(1, Cout, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let b = self.value(bias);
        if b.shape() != Shape::new(1, self.shape(weight).n(), 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias {} does not match weight {}", b.shape(), self.shape(weight)),
            ));
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(weight), b.data(), stride, padding)?;
        Ok(self.push(
            OpTag::Conv2d { stride, padding },
            vec![x, weight, bias],
            out,
            Saved::None,
        ))
    }

    pub fn upsample(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        let out = kernels::upsample_forward(self.value(x), scale)?;
        Ok(self.push(OpTag::Upsample { scale }, vec![x], out, Saved::None))
    }

    /// Batch normalization over `(N, H, W)` per channel. `gamma` and `beta`
    /// have shape `(1, C, 1, 1)`. In training mode the running statistics are
    /// updated as `new = (1 - momentum) * old + momentum * batch`.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats<T>,
        cfg: BnConfig,
        mode: Mode,
    ) -> Result<NodeId> {
        let c = self.shape(x).c();
        let want = Shape::new(1, c, 1, 1);
        if self.shape(gamma) != want || self.shape(beta) != want || stats.channels() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "input {} with gamma {}, beta {}, {} running channels",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta),
                    stats.channels()
                ),
            ));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::Invalid("batchnorm2d: epsilon must be positive".into()));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_stats(self.value(x));
                let m = cfg.momentum;
                for ch in 0..c {
                    let (om, ov) = if stats.initialized {
                        (stats.mean[ch].as_f64(), stats.var[ch].as_f64())
                    } else {
                        (mean[ch], var[ch])
                    };
                    stats.mean[ch] = T::lit((1.0 - m) * om + m * mean[ch]);
                    stats.var[ch] = T::lit((1.0 - m) * ov + m * var[ch]);
                }
                stats.initialized = true;
                (mean, var)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::Invalid(
                        "batchnorm2d: evaluation mode needs initialized running statistics".into(),
                    ));
                }
                (
                    stats.mean.iter().map(|v| v.as_f64()).collect(),
                    stats.var.iter().map(|v| v.as_f64()).collect(),
                )
            }
        };
        let (y, xhat, inv_std) = kernels::batchnorm_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            cfg.eps,
        );
        Ok(self.push(
            OpTag::BatchNorm { mode },
            vec![x, gamma, beta],
            y,
            Saved::Bn { xhat, inv_std },
        ))
    }

    fn map(&mut self, x: NodeId, op: OpTag, f: impl Fn(T) -> T) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| f(*a)).collect())
            .expect("elementwise map preserves length");
        self.push(op, vec![x], out, Saved::None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, OpTag::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, OpTag::Sigmoid, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, OpTag::Tanh, |v| v.tanh())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{} vs {}", va.shape(), vb.shape())));
        }
        let out = Tensor::new(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect(),
        )?;
        Ok(self.push(OpTag::Add, vec![a, b], out, Saved::None))
    }

    /// Concatenate along the channel axis, preserving input order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .map(|p| self.shape(*p))
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::shape("concat", format!("{first} vs {s}")));
            }
            channels += s.c();
        }
        let shape = Shape::new(first.n(), channels, first.h(), first.w());
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n() {
            for p in parts {
                let v = self.value(*p);
                let per = v.shape().c() * v.shape().plane();
                data.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(OpTag::Concat, parts.to_vec(), out, Saved::None))
    }

    /// Channels `start..start + len` of `x`.
    pub fn channel_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c() {
            return Err(Error::shape(
                "channel slice",
                format!("channels {start}..{} of {s}", start + len),
            ));
        }
        let plane = s.plane();
        let v = self.value(x);
        let mut data = Vec::with_capacity(s.n() * len * plane);
        for n in 0..s.n() {
            let from = (n * s.c() + start) * plane;
            data.extend_from_slice(&v.data()[from..from + len * plane]);
        }
        let out = Tensor::new(Shape::new(s.n(), len, s.h(), s.w()), data)?;
        Ok(self.push(OpTag::Slice { start, len }, vec![x], out, Saved::None))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(OpTag::Sum, vec![x], Tensor::scalar(s), Saved::None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = T::lit(v.sum_f64() / v.numel() as f64);
        self.push(OpTag::Mean, vec![x], Tensor::scalar(s), Saved::None)
    }

    /// `scale * sum((a - b)^2)` as a scalar node.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "squared error",
                format!("{} vs {}", va.shape(), vb.shape()),
            ));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        Ok(self.push(
            OpTag::SquaredError { scale },
            vec![a, b],
            Tensor::scalar(T::lit(scale * s)),
            Saved::None,
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel().max(1);
        self.squared_error(a, b, 1.0 / n as f64)
    }

    /// Check that every node only consumes earlier nodes.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.inputs.iter().find(|j| j.0 >= i) {
                return Err(Error::Graph(format!(
                    "cycle: node {i} ({:?}) consumes node {} which does not precede it",
                    node.op, bad.0
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode differentiation of the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.validate()?;
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, OpTag::Param | OpTag::Input) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
            let mut out: Vec<(usize, Tensor<T>)> = Vec::with_capacity(3);
            match node.op {
                OpTag::Conv2d { stride, padding } => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    let cg = kernels::conv2d_backward(x, w, &gy, stride, padding, wants(0))?;
                    if let Some(dx) = cg.dx {
                        out.push((0, dx));
                    }
                    out.push((1, cg.dw));
                    out.push((2, Tensor::new(Shape::new(1, cg.db.len(), 1, 1), cg.db)?));
                }
                OpTag::Upsample { scale } => {
                    let s = self.shape(node.inputs[0]);
                    out.push((0, kernels::upsample_backward(s, &gy, scale)));
                }
                OpTag::BatchNorm { mode } => {
                    let Saved::Bn { xhat, inv_std } = &node.saved else {
                        return Err(Error::Graph(format!("node {i}: batch-norm state missing")));
                    };
                    let gamma = self.value(node.inputs[1]).data();
                    let (dx, dg, db) =
                        kernels::batchnorm_backward(&gy, xhat, inv_std, gamma, mode == Mode::Train);
                    let c = dg.len();
                    out.push((0, dx));
                    out.push((1, Tensor::new(Shape::new(1, c, 1, 1), dg)?));
                    out.push((2, Tensor::new(Shape::new(1, c, 1, 1), db)?));
                }
                OpTag::Relu => {
                    let x = self.value(node.inputs[0]);
                    let d = gy
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect();
                    out.push((0, Tensor::new(gy.shape(), d)?));
                }
                OpTag::Sigmoid => {
                    let d = gy
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| *g * *s * (T::one() - *s))
                        .collect();
                    out.push((0, Tensor::new(gy.shape(), d)?));
                }
                OpTag::Tanh => {
                    let d = gy
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, t)| *g * (T::one() - *t * *t))
                        .collect();
                    out.push((0, Tensor::new(gy.shape(), d)?));
                }
                OpTag::Add => {
                    out.push((0, gy.clone()));
                    out.push((1, gy));
                }
                OpTag::Concat => {
                    let n = gy.shape().n();
                    let plane = gy.shape().plane();
                    let mut c0 = 0;
                    for (k, p) in node.inputs.iter().enumerate() {
                        let s = self.shape(*p);
                        if self.nodes[p.0].requires_grad {
                            let mut d = Vec::with_capacity(s.numel());
                            for b in 0..n {
                                let start = (b * gy.shape().c() + c0) * plane;
                                d.extend_from_slice(&gy.data()[start..start + s.c() * plane]);
                            }
                            out.push((k, Tensor::new(s, d)?));
                        }
                        c0 += s.c();
                    }
                }
                OpTag::Slice { start, len } => {
                    let s = self.shape(node.inputs[0]);
                    let plane = s.plane();
                    let mut d = Tensor::zeros(s);
                    for n in 0..s.n() {
                        let to = (n * s.c() + start) * plane;
                        let from = n * len * plane;
                        d.data_mut()[to..to + len * plane]
                            .copy_from_slice(&gy.data()[from..from + len * plane]);
                    }
                    out.push((0, d));
                }
                OpTag::Sum | OpTag::Mean => {
                    let s = self.shape(node.inputs[0]);
                    let g = if node.op == OpTag::Sum {
                        gy.data()[0]
                    } else {
                        gy.data()[0] / T::lit(s.numel() as f64)
                    };
                    out.push((0, Tensor::full(s, g)));
                }
                OpTag::SquaredError { scale } => {
                    let (a, b) = (self.value(node.inputs[0]), self.value(node.inputs[1]));
                    let k = gy.data()[0] * T::lit(2.0 * scale);
                    let da: Vec<T> = a.data().iter().zip(b.data()).map(|(x, y)| k * (*x - *y)).collect();
                    if wants(1) {
                        out.push((1, Tensor::new(b.shape(), da.iter().map(|v| -*v).collect())?));
                    }
                    out.push((0, Tensor::new(a.shape(), da)?));
                }
                OpTag::Input | OpTag::Param => unreachable!(),
            }
            for (k, g) in out {
                let target = node.inputs[k].0;
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn self_mse_gradient_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 2, 1, 2), &[1.0, -2.0, 3.0, 0.5]));
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        g.param("unused", t(Shape::new(1, 3, 1, 1), &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let again = g.param("x", t(Shape::new(1, 1, 1, 2), &[9.0, 9.0]));
        assert_eq!(x, again);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Graph(_))));
    }

    #[test]
    fn cycle_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(Shape::new(1, 1, 1, 1), &[1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        // forge a back edge: the relu now consumes the sum that follows it
        g.nodes[r.0].inputs[0] = s;
        let err = g.backward(s).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn concat_keeps_channel_order_and_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::full(Shape::new(1, 2, 4, 4), 1.0));
        let b = g.param("b", Tensor::full(Shape::new(1, 3, 4, 4), 2.0));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 5, 4, 4));
        assert_eq!(g.value(c).at(0, 1, 3, 3), 1.0);
        assert_eq!(g.value(c).at(0, 2, 0, 0), 2.0);
        let w = g.input(Tensor::from_fn(Shape::new(1, 5, 4, 4), |[_, c, _, _]| c as f64));
        let z = g.input(Tensor::zeros(Shape::new(1, 5, 4, 4)));
        let d = g.add(c, w).unwrap();
        let l = g.squared_error(d, z, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        // d = concat + channel index; dl/dconcat = d
        assert_eq!(grads.get("a").unwrap().at(0, 1, 0, 0), 2.0);
        assert_eq!(grads.get("b").unwrap().at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let b = g.input(Tensor::zeros(Shape::new(1, 2, 4, 5)));
        assert!(g.add(a, b).is_err());
        assert!(g.concat(&[a, b]).is_err());
        assert!(g.mse(a, b).is_err());
    }
}
