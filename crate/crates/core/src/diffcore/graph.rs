//! Define-then-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in topological order by the builder methods, which
//! also infer shapes. [`Graph::forward`] evaluates every node and caches the
//! values; [`Graph::backward`] walks the nodes once in reverse and returns
//! gradients for the trainable parameters.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeometry};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param { name: String, trainable: bool },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    Relu(NodeId),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SpatialMean(NodeId),
    ChannelVariance(NodeId),
    ChannelCovariance(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Affine { .. } => "affine",
            Op::SpatialMean(_) => "spatial_mean",
            Op::ChannelVariance(_) => "channel_variance",
            Op::ChannelCovariance(..) => "channel_covariance",
            Op::Concat(_) => "concat",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is `[C]`, left is `[C, ...]`.
    Channel,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
    output: Option<NodeId>,
    values: Option<Vec<Tensor>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input(name) | Op::Param { name, .. } => {
                format!("#{} {} '{}'", id.0, self.nodes[id.0].op.kind(), name)
            }
            op => format!("#{} {}", id.0, op.kind()),
        }
    }

    fn next_label(&self, kind: &str) -> String {
        format!("#{} {}", self.nodes.len(), kind)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input(_) => false,
            Op::Param { trainable, .. } => *trainable,
            _ => self.operands(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.values = None;
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn operands(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input(_) | Op::Param { .. } => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Affine {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(a)
            | Op::SpatialMean(a)
            | Op::ChannelVariance(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ChannelCovariance(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }

    fn leaf(&mut self, name: &str, shape: &[usize], op: Op) -> Result<NodeId> {
        if let Some(&id) = self.by_name.get(name) {
            let same_kind = std::mem::discriminant(&self.nodes[id.0].op) == std::mem::discriminant(&op);
            if !same_kind || self.nodes[id.0].shape != shape {
                return Err(Error::shape(
                    self.label(id),
                    format!("redeclared as {} with shape {shape:?}", op.kind()),
                ));
            }
            return Ok(id);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(name, format!("invalid shape {shape:?}")));
        }
        let id = self.push(op, shape.to_vec());
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a named input fed at [`Graph::forward`] time. Inputs never
    /// receive gradients.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, Op::Input(name.to_string()))
    }

    /// Declares a named parameter read from the [`ParamStore`]. Declaring the
    /// same name twice returns the same node.
    pub fn param(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        self.leaf(
            name,
            shape,
            Op::Param {
                name: name.to_string(),
                trainable,
            },
        )
    }

    /// Convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let label = self.next_label("conv2d");
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                label,
                format!("expected [C,H,W], [O,C,k,k], [O]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        if ws[1] != xs[0] || ws[2] != ws[3] || bs[0] != ws[0] {
            return Err(Error::shape(
                label,
                format!("incompatible input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let geometry = ConvGeometry {
            in_channels: xs[0],
            in_height: xs[1],
            in_width: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let (oh, ow) = geometry.output_size().ok_or_else(|| {
            Error::shape(
                label,
                format!("kernel {} stride {stride} does not fit input {xs:?}", ws[2]),
            )
        })?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            vec![ws[0], oh, ow],
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape)
    }

    /// `x · W + b` with `x` flattened to `[n]`, `W: [n, m]`, `b: [m]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = numel(self.shape(input));
        let (ws, bs) = (self.shape(weight), self.shape(bias));
        if ws.len() != 2 || ws[0] != n || bs != [ws[1]] {
            return Err(Error::shape(
                self.next_label("affine"),
                format!("input of {n} values, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let m = ws[1];
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            vec![m],
        ))
    }

    fn channel_shape(&self, x: NodeId, kind: &str) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(
                self.next_label(kind),
                format!("expected [C, spatial...], got {s:?}"),
            ));
        }
        Ok(vec![s[0]])
    }

    /// Per-channel mean over all spatial positions: `[C, h, w] -> [C]`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.channel_shape(x, "spatial_mean")?;
        Ok(self.push(Op::SpatialMean(x), shape))
    }

    /// Per-channel population variance: `[C, h, w] -> [C]`.
    pub fn channel_variance(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.channel_shape(x, "channel_variance")?;
        Ok(self.push(Op::ChannelVariance(x), shape))
    }

    /// Per-channel population covariance of two equally shaped maps.
    pub fn channel_covariance(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let shape = self.channel_shape(x, "channel_covariance")?;
        if self.shape(x) != self.shape(y) {
            return Err(Error::shape(
                self.next_label("channel_covariance"),
                format!("{:?} vs {:?}", self.shape(x), self.shape(y)),
            ));
        }
        Ok(self.push(Op::ChannelCovariance(x, y), shape))
    }

    /// Concatenates the flattened operands into one vector.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape(self.next_label("concat"), "no operands"));
        }
        let n = xs.iter().map(|&x| numel(self.shape(x))).sum();
        Ok(self.push(Op::Concat(xs.to_vec()), vec![n]))
    }

    fn broadcast(&self, a: NodeId, b: NodeId, kind: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sa.len() >= 2 && sb == [sa[0]] {
            Ok(Broadcast::Channel)
        } else {
            Err(Error::shape(
                self.next_label(kind),
                format!("cannot broadcast {sb:?} onto {sa:?}"),
            ))
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: &str, op: Op) -> Result<NodeId> {
        self.broadcast(a, b, kind)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), shape)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, c), shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// Selects the node returned by `forward` (default: the last node).
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    /// Names of all trainable parameters referenced by the graph.
    pub fn trainable_params(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param {
                    name,
                    trainable: true,
                } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Value of any node after the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.as_ref().map(|v| &v[id.0])
    }

    /// Evaluates the graph. Inputs are looked up by name in `inputs`,
    /// parameters in `params`; both must match their declared shapes.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>, params: &ParamStore) -> Result<Tensor> {
        let out = self
            .output()
            .ok_or_else(|| Error::State("forward on an empty graph".into()))?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let id = NodeId(idx);
            let v = match &node.op {
                Op::Input(name) => {
                    let t = inputs.get(name).ok_or_else(|| {
                        Error::shape(self.label(id), "no value fed for input")
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            self.label(id),
                            format!("declared {:?}, fed {:?}", node.shape, t.shape()),
                        ));
                    }
                    t.clone()
                }
                Op::Param { name, .. } => {
                    let t = params.get(name).ok_or_else(|| {
                        Error::shape(self.label(id), "parameter missing from store")
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            self.label(id),
                            format!("declared {:?}, store has {:?}", node.shape, t.shape()),
                        ));
                    }
                    t.clone()
                }
                op => eval(op, &node.shape, &values),
            };
            values.push(v);
        }
        let result = values[out.0].clone();
        self.values = Some(values);
        Ok(result)
    }

    /// Relu on/off pattern of the last forward pass. Finite-difference
    /// checks use it to detect when a perturbation crossed a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let Some(values) = &self.values else {
            return Vec::new();
        };
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(values[x.0].data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Propagates `output_grad` from the output node back to every trainable
    /// parameter. Each node is visited exactly once.
    pub fn backward(&self, output_grad: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let values = self
            .values
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out = self.output().expect("forward ran on a non-empty graph");
        if output_grad.shape() != self.nodes[out.0].shape.as_slice() {
            return Err(Error::shape(
                self.label(out),
                format!(
                    "output gradient shape {:?} does not match output {:?}",
                    output_grad.shape(),
                    self.nodes[out.0].shape
                ),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(output_grad.data().to_vec());
        let mut result = BTreeMap::new();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Param { name, .. } = &node.op {
                result.insert(name.clone(), Tensor::new(node.shape.clone(), g)?);
                continue;
            }
            self.propagate(&node.op, &node.shape, &g, values, &mut grads);
        }

        // Trainable parameters the output does not depend on get zeros.
        for node in &self.nodes {
            if let Op::Param {
                name,
                trainable: true,
            } = &node.op
            {
                result
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(&node.shape));
            }
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        shape: &[usize],
        g: &[f64],
        values: &[Tensor],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match *op {
            Op::Input(_) | Op::Param { .. } => unreachable!("leaves handled by caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let cg = kernels::conv2d_backward(
                    &geometry,
                    values[input.0].data(),
                    values[weight.0].data(),
                    g,
                    self.wants(input),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, input, dx);
                }
                self.accumulate(grads, weight, cg.weight);
                self.accumulate(grads, bias, cg.bias);
            }
            Op::Relu(x) => {
                let dx = values[x.0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = values[input.0].data();
                let w = values[weight.0].data();
                let m = g.len();
                if self.wants(input) {
                    let dx = w
                        .chunks(m)
                        .map(|row| row.iter().zip(g).fold(0.0, |a, (&wv, &gv)| a + wv * gv))
                        .collect();
                    self.accumulate(grads, input, dx);
                }
                if self.wants(weight) {
                    let mut dw = Vec::with_capacity(x.len() * m);
                    for &xv in x {
                        dw.extend(g.iter().map(|&gv| xv * gv));
                    }
                    self.accumulate(grads, weight, dw);
                }
                self.accumulate(grads, bias, g.to_vec());
            }
            Op::SpatialMean(x) => {
                let n = values[x.0].numel() / shape[0];
                let inv = 1.0 / n as f64;
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(n))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::ChannelVariance(x) => {
                let xv = values[x.0].data();
                let c = shape[0];
                let n = xv.len() / c;
                let means = kernels::channel_means(xv, c);
                let mut dx = Vec::with_capacity(xv.len());
                for (ch, chunk) in xv.chunks(n).enumerate() {
                    let k = 2.0 * g[ch] / n as f64;
                    dx.extend(chunk.iter().map(|&v| k * (v - means[ch])));
                }
                self.accumulate(grads, x, dx);
            }
            Op::ChannelCovariance(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                let c = shape[0];
                let n = av.len() / c;
                let centered_grad = |other: &[f64]| -> Vec<f64> {
                    let means = kernels::channel_means(other, c);
                    let mut d = Vec::with_capacity(other.len());
                    for (ch, chunk) in other.chunks(n).enumerate() {
                        let k = g[ch] / n as f64;
                        d.extend(chunk.iter().map(|&v| k * (v - means[ch])));
                    }
                    d
                };
                if self.wants(a) {
                    let da = centered_grad(bv);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = centered_grad(av);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Concat(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = values[x.0].numel();
                    self.accumulate(grads, x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.propagate_binary(op, a, b, g, values, grads)
            }
            Op::AddScalar(x, _) => self.accumulate(grads, x, g.to_vec()),
            Op::MulScalar(x, c) => self.accumulate(grads, x, g.iter().map(|&v| v * c).collect()),
            Op::Sum(x) => {
                let n = values[x.0].numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = values[x.0].numel();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
        }
    }

    fn propagate_binary(
        &self,
        op: &Op,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        values: &[Tensor],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let av = values[a.0].data();
        let bv = values[b.0].data();
        let per = av.len() / bv.len();
        let rhs = |i: usize| bv[i / per];
        // d(out)/d(a_i) and d(out)/d(b at i) for each element of the output.
        let (da, db): (Vec<f64>, Vec<f64>) = match op {
            Op::Add(..) => (g.to_vec(), g.to_vec()),
            Op::Sub(..) => (g.to_vec(), g.iter().map(|v| -v).collect()),
            Op::Mul(..) => (
                g.iter().enumerate().map(|(i, &gv)| gv * rhs(i)).collect(),
                g.iter().zip(av).map(|(&gv, &x)| gv * x).collect(),
            ),
            Op::Div(..) => (
                g.iter().enumerate().map(|(i, &gv)| gv / rhs(i)).collect(),
                g.iter()
                    .enumerate()
                    .map(|(i, &gv)| -gv * av[i] / (rhs(i) * rhs(i)))
                    .collect(),
            ),
            _ => unreachable!(),
        };
        if self.wants(a) {
            self.accumulate(grads, a, da);
        }
        if self.wants(b) {
            let db = if per == 1 {
                db
            } else {
                db.chunks(per)
                    .map(|ch| ch.iter().fold(0.0, |acc, &v| acc + v))
                    .collect()
            };
            self.accumulate(grads, b, db);
        }
    }
}

fn eval(op: &Op, shape: &[usize], values: &[Tensor]) -> Tensor {
    let data = match *op {
        Op::Input(_) | Op::Param { .. } => unreachable!("leaves handled by forward"),
        Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
        } => kernels::conv2d_forward(
            &geometry,
            values[input.0].data(),
            values[weight.0].data(),
            values[bias.0].data(),
        ),
        Op::Relu(x) => values[x.0].data().iter().map(|&v| v.max(0.0)).collect(),
        Op::Affine {
            input,
            weight,
            bias,
        } => kernels::affine_forward(
            values[input.0].data(),
            values[weight.0].data(),
            values[bias.0].data(),
        ),
        Op::SpatialMean(x) => kernels::channel_means(values[x.0].data(), shape[0]),
        Op::ChannelVariance(x) => {
            let xv = values[x.0].data();
            kernels::channel_covariances(xv, xv, shape[0])
        }
        Op::ChannelCovariance(a, b) => {
            kernels::channel_covariances(values[a.0].data(), values[b.0].data(), shape[0])
        }
        Op::Concat(ref xs) => xs.iter().flat_map(|x| values[x.0].data().iter().copied()).collect(),
        Op::Add(a, b) => binary(&values[a.0], &values[b.0], |x, y| x + y),
        Op::Sub(a, b) => binary(&values[a.0], &values[b.0], |x, y| x - y),
        Op::Mul(a, b) => binary(&values[a.0], &values[b.0], |x, y| x * y),
        Op::Div(a, b) => binary(&values[a.0], &values[b.0], |x, y| x / y),
        Op::AddScalar(x, c) => values[x.0].data().iter().map(|&v| v + c).collect(),
        Op::MulScalar(x, c) => values[x.0].data().iter().map(|&v| v * c).collect(),
        Op::Sum(x) => vec![values[x.0].data().iter().fold(0.0, |a, &v| a + v)],
        Op::Mean(x) => {
            let d = values[x.0].data();
            vec![d.iter().fold(0.0, |a, &v| a + v) / d.len() as f64]
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape inferred at build time")
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let per = a.numel() / b.numel();
    a.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i / per]))
        .collect()
}
