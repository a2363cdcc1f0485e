//! A small reverse-mode differentiation engine for dense classifiers.
//!
//! Graphs are flat, topologically ordered node lists. Every tensor flowing
//! through a graph is two-dimensional: a leading batch dimension and a feature
//! width. Loss heads are scalar nodes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::seed_key;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;
pub type Feed = BTreeMap<String, Tensor>;

/// Negative-side slope for [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    LeakyRelu,
    Tanh,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Sigmoid, Activation::LeakyRelu, Activation::Tanh, Activation::Relu];

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortKind {
    /// `[batch, width]` feature matrix.
    Features,
    /// `[batch, 1]` class indices stored as floats.
    Labels,
    /// `[batch, 1]` row weights, 1.0 for live rows and 0.0 for padding.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPort {
    pub name: String,
    pub kind: PortKind,
    pub width: usize,
    pub binding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Input {
        port: String,
    },
    /// `input · weight + bias`, with `weight: [in, out]` and `bias: [out]`.
    Affine {
        input: usize,
        weight: String,
        bias: String,
        /// Identity used to seed initialization; survives packing.
        owner: String,
        layer: usize,
    },
    Activation {
        input: usize,
        kind: Activation,
    },
    /// Column-wise concatenation.
    Concat {
        inputs: Vec<usize>,
    },
    /// Mean softmax cross-entropy over the unmasked rows.
    SoftmaxCrossEntropy {
        head: String,
        logits: usize,
        labels: String,
        mask: Option<String>,
    },
}

impl Node {
    fn operands(&self) -> Vec<usize> {
        match self {
            Node::Input { .. } => vec![],
            Node::Affine { input, .. } | Node::Activation { input, .. } => vec![*input],
            Node::Concat { inputs } => inputs.clone(),
            Node::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key || (key == "leakyrelu" && *a == Activation::LeakyRelu))
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

/// Which loss heads seed the backward pass.
#[derive(Debug, Clone, Copy)]
pub enum Heads<'a> {
    All,
    Only(&'a str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub outputs: BTreeMap<String, Tensor>,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationGraph {
    model_id: String,
    nodes: Vec<Node>,
    input_ports: Vec<InputPort>,
    outputs: BTreeMap<String, usize>,
    param_shapes: BTreeMap<String, Vec<usize>>,
    parameters: ParamMap,
}

impl ComputationGraph {
    /// Builds and validates a graph. Parameters start empty; see
    /// [`ComputationGraph::init_parameters`].
    pub fn new(
        model_id: impl Into<String>,
        input_ports: Vec<InputPort>,
        nodes: Vec<Node>,
        outputs: BTreeMap<String, usize>,
        param_shapes: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let graph =
            Self { model_id: model_id.into(), nodes, input_ports, outputs, param_shapes, parameters: ParamMap::new() };
        graph.widths()?;
        graph.check_reachability()?;
        Ok(graph)
    }

    /// Dense classifier: `x -> (affine -> activation)* -> affine -> loss`.
    ///
    /// Ports are `x` (features) and `y` (labels); the output is `logits` and
    /// the loss head is `loss`.
    pub fn mlp(model_id: impl Into<String>, spec: &MlpSpec) -> Result<Self, GraphError> {
        let model_id = model_id.into();
        let mut nodes = vec![Node::Input { port: "x".into() }];
        let mut shapes = BTreeMap::new();
        let mut width = spec.input_dim;
        let mut last = 0;
        let layer_widths = spec.hidden.iter().copied().chain(std::iter::once(spec.classes));
        for (layer, out) in layer_widths.enumerate() {
            let (w, b) = (format!("dense{layer}.weight"), format!("dense{layer}.bias"));
            shapes.insert(w.clone(), vec![width, out]);
            shapes.insert(b.clone(), vec![out]);
            nodes.push(Node::Affine { input: last, weight: w, bias: b, owner: model_id.clone(), layer });
            last = nodes.len() - 1;
            if layer < spec.hidden.len() {
                nodes.push(Node::Activation { input: last, kind: spec.activation });
                last = nodes.len() - 1;
            }
            width = out;
        }
        let logits = last;
        nodes.push(Node::SoftmaxCrossEntropy { head: "loss".into(), logits, labels: "y".into(), mask: None });
        let ports = vec![
            InputPort { name: "x".into(), kind: PortKind::Features, width: spec.input_dim, binding: None },
            InputPort { name: "y".into(), kind: PortKind::Labels, width: 1, binding: None },
        ];
        let outputs = BTreeMap::from([("logits".to_string(), logits)]);
        Self::new(model_id, ports, nodes, outputs, shapes)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_ports(&self) -> &[InputPort] {
        &self.input_ports
    }

    pub fn outputs(&self) -> &BTreeMap<String, usize> {
        &self.outputs
    }

    pub fn param_shapes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.param_shapes
    }

    pub fn parameters(&self) -> &ParamMap {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut ParamMap {
        &mut self.parameters
    }

    pub fn take_parameters(&mut self) -> ParamMap {
        std::mem::take(&mut self.parameters)
    }

    pub fn parameter_count(&self) -> usize {
        self.param_shapes.values().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn loss_heads(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::SoftmaxCrossEntropy { head, .. } => Some(head.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Replaces all parameters after checking names and shapes.
    pub fn set_parameters(&mut self, params: ParamMap) -> Result<(), GraphError> {
        for (name, shape) in &self.param_shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(GraphError::BadTensor { shape: shape.clone(), len: t.len() });
                }
                None => return Err(GraphError::MissingParameter(name.clone())),
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.param_shapes.contains_key(*k)) {
            return Err(GraphError::UnreachableParameter(extra.clone()));
        }
        self.parameters = params;
        Ok(())
    }

    /// Xavier-uniform weights and zero biases. Each affine layer draws from a
    /// stream keyed by `(owner, layer, seed)` only.
    pub fn init_parameters(&self, seed: u64) -> ParamMap {
        let mut params = ParamMap::new();
        for node in &self.nodes {
            if let Node::Affine { weight, bias, owner, layer, .. } = node {
                let shape = self.param_shapes[weight].clone();
                let (fan_in, fan_out) = (shape[0], shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = derive_rng(&seed_key!["xavier", owner.as_str(), *layer, seed]);
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                params.insert(weight.clone(), Tensor::new(shape, data).expect("shape from spec"));
                let bshape = self.param_shapes[bias].clone();
                params.insert(bias.clone(), Tensor::zeros(bshape));
            }
        }
        params
    }

    pub fn initialize(&mut self, seed: u64) {
        self.parameters = self.init_parameters(seed);
    }

    fn port(&self, name: &str) -> Option<&InputPort> {
        self.input_ports.iter().find(|p| p.name == name)
    }

    /// Static width of every node's output.
    pub fn widths(&self) -> Result<Vec<usize>, GraphError> {
        let mut widths = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let bad = |reason: String| GraphError::BadNode { node: i, reason };
            for op in node.operands() {
                if op >= i {
                    return Err(bad(format!("operand {op} is not topologically earlier")));
                }
                if matches!(self.nodes[op], Node::SoftmaxCrossEntropy { .. }) {
                    return Err(bad("loss heads cannot feed other nodes".into()));
                }
            }
            let w = match node {
                Node::Input { port } => {
                    let p = self.port(port).ok_or_else(|| bad(format!("unknown port `{port}`")))?;
                    if p.kind != PortKind::Features {
                        return Err(bad(format!("port `{port}` is not a feature port")));
                    }
                    p.width
                }
                Node::Affine { input, weight, bias, .. } => {
                    let ws = self.param_shapes.get(weight).ok_or_else(|| bad(format!("no shape for `{weight}`")))?;
                    let bs = self.param_shapes.get(bias).ok_or_else(|| bad(format!("no shape for `{bias}`")))?;
                    if ws.len() != 2 || ws[0] != widths[*input] || bs.as_slice() != [ws[1]] {
                        return Err(bad(format!(
                            "affine shapes {ws:?}/{bs:?} do not fit input width {}",
                            widths[*input]
                        )));
                    }
                    ws[1]
                }
                Node::Activation { input, .. } => widths[*input],
                Node::Concat { inputs } => {
                    if inputs.is_empty() {
                        return Err(bad("empty concat".into()));
                    }
                    inputs.iter().map(|&j| widths[j]).sum()
                }
                Node::SoftmaxCrossEntropy { labels, mask, .. } => {
                    match self.port(labels) {
                        Some(p) if p.kind == PortKind::Labels => {}
                        _ => return Err(bad(format!("`{labels}` is not a label port"))),
                    }
                    if let Some(m) = mask {
                        match self.port(m) {
                            Some(p) if p.kind == PortKind::Mask => {}
                            _ => return Err(bad(format!("`{m}` is not a mask port"))),
                        }
                    }
                    1
                }
            };
            if w == 0 {
                return Err(bad("zero-width node".into()));
            }
            widths.push(w);
        }
        for (name, &idx) in &self.outputs {
            if idx >= self.nodes.len() {
                return Err(GraphError::BadNode { node: idx, reason: format!("output `{name}` out of range") });
            }
        }
        Ok(widths)
    }

    fn check_reachability(&self) -> Result<(), GraphError> {
        let mut live = vec![false; self.nodes.len()];
        for &i in self.outputs.values() {
            live[i] = true;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n, Node::SoftmaxCrossEntropy { .. }) {
                live[i] = true;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for op in self.nodes[i].operands() {
                    live[op] = true;
                }
            }
        }
        let mut reached = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let (true, Node::Affine { weight, bias, .. }) = (live[i], n) {
                reached.insert(weight.as_str());
                reached.insert(bias.as_str());
            }
        }
        match self.param_shapes.keys().find(|k| !reached.contains(k.as_str())) {
            Some(name) => Err(GraphError::UnreachableParameter(name.clone())),
            None => Ok(()),
        }
    }

    fn check_feed(&self, feed: &Feed) -> Result<usize, GraphError> {
        let mut batch = None;
        for port in &self.input_ports {
            let mismatch = |reason: String| GraphError::PortMismatch { port: port.name.clone(), reason };
            let t = feed.get(&port.name).ok_or_else(|| mismatch("missing from feed".into()))?;
            if t.shape().len() != 2 || t.cols() != port.width {
                return Err(mismatch(format!("expected [batch, {}], got {:?}", port.width, t.shape())));
            }
            match batch {
                None => batch = Some(t.rows()),
                Some(b) if b != t.rows() => {
                    return Err(mismatch(format!("batch {} disagrees with {b}", t.rows())));
                }
                _ => {}
            }
        }
        batch.ok_or_else(|| GraphError::PortMismatch { port: "<none>".into(), reason: "graph has no inputs".into() })
    }

    fn param(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.parameters.get(name).ok_or_else(|| GraphError::MissingParameter(name.to_string()))
    }

    /// Values of every node; loss nodes hold a `[1, 1]` tensor.
    fn evaluate(&self, feed: &Feed) -> Result<Vec<Tensor>, GraphError> {
        let batch = self.check_feed(feed)?;
        let widths = self.widths()?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node {
                Node::Input { port } => feed[port].clone(),
                Node::Affine { input, weight, bias, .. } => {
                    affine(&values[*input], self.param(weight)?, self.param(bias)?)
                }
                Node::Activation { input, kind } => {
                    let x = &values[*input];
                    let data = x.data().iter().map(|&z| kind.apply(z)).collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                Node::Concat { inputs } => {
                    let mut data = Vec::with_capacity(batch * widths[i]);
                    for r in 0..batch {
                        for &j in inputs {
                            data.extend_from_slice(values[j].row(r));
                        }
                    }
                    Tensor::new(vec![batch, widths[i]], data)?
                }
                Node::SoftmaxCrossEntropy { logits, labels, mask, .. } => {
                    let (loss, _) = softmax_xent(&values[*logits], &feed[labels], mask.as_ref().map(|m| &feed[m]))?;
                    Tensor::new(vec![1, 1], vec![loss])?
                }
            };
            if !value.is_finite() {
                return Err(GraphError::NonFinite(i));
            }
            values.push(value);
        }
        Ok(values)
    }

    pub fn forward(&self, feed: &Feed) -> Result<ForwardOutput, GraphError> {
        let values = self.evaluate(feed)?;
        let outputs = self.outputs.iter().map(|(k, &i)| (k.clone(), values[i].clone())).collect();
        let losses = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                Node::SoftmaxCrossEntropy { head, .. } => Some((head.clone(), values[i].data()[0])),
                _ => None,
            })
            .collect();
        Ok(ForwardOutput { outputs, losses })
    }

    /// Gradients of the selected loss heads (summed) with respect to every
    /// parameter. Returns the forward output alongside.
    pub fn backward(&self, feed: &Feed, heads: Heads<'_>) -> Result<(ForwardOutput, ParamMap), GraphError> {
        let values = self.evaluate(feed)?;
        if let Heads::Only(name) = heads {
            if !self.loss_heads().contains(&name) {
                return Err(GraphError::UnknownHead(name.to_string()));
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut param_grads: ParamMap =
            self.param_shapes.iter().map(|(k, s)| (k.clone(), Tensor::zeros(s.clone()))).collect();

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if let Node::SoftmaxCrossEntropy { head, logits, labels, mask } = node {
                let selected = match heads {
                    Heads::All => true,
                    Heads::Only(name) => name == head,
                };
                if selected {
                    let (_, dlogits) = softmax_xent(&values[*logits], &feed[labels], mask.as_ref().map(|m| &feed[m]))?;
                    accumulate(&mut grads[*logits], dlogits);
                }
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            match node {
                Node::Input { .. } | Node::SoftmaxCrossEntropy { .. } => {}
                Node::Affine { input, weight, bias, .. } => {
                    let x = &values[*input];
                    let w = self.param(weight)?;
                    let (rows, inw, outw) = (x.rows(), x.cols(), w.shape()[1]);
                    let gw = param_grads.get_mut(weight).expect("shape registered").data_mut();
                    for r in 0..rows {
                        let xr = x.row(r);
                        let gr = upstream.row(r);
                        for k in 0..inw {
                            let xv = xr[k];
                            for j in 0..outw {
                                gw[k * outw + j] += xv * gr[j];
                            }
                        }
                    }
                    let gb = param_grads.get_mut(bias).expect("shape registered").data_mut();
                    for r in 0..rows {
                        for (j, g) in upstream.row(r).iter().enumerate() {
                            gb[j] += g;
                        }
                    }
                    if !matches!(self.nodes[*input], Node::Input { .. }) {
                        let wd = w.data();
                        let mut dx = vec![0.0; rows * inw];
                        for r in 0..rows {
                            let gr = upstream.row(r);
                            for k in 0..inw {
                                let mut s = 0.0;
                                for j in 0..outw {
                                    s += wd[k * outw + j] * gr[j];
                                }
                                dx[r * inw + k] = s;
                            }
                        }
                        accumulate(&mut grads[*input], Tensor::new(vec![rows, inw], dx)?);
                    }
                }
                Node::Activation { input, kind } => {
                    let z = values[*input].data();
                    let a = values[i].data();
                    let data = upstream
                        .data()
                        .iter()
                        .zip(z.iter().zip(a))
                        .map(|(g, (&zv, &av))| g * kind.derivative(zv, av))
                        .collect();
                    accumulate(&mut grads[*input], Tensor::new(upstream.shape().to_vec(), data)?);
                }
                Node::Concat { inputs } => {
                    let rows = upstream.rows();
                    let mut offset = 0;
                    for &j in inputs {
                        let w = values[j].cols();
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&upstream.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads[j], Tensor::new(vec![rows, w], part)?);
                        offset += w;
                    }
                }
            }
        }
        let outputs = self.outputs.iter().map(|(k, &i)| (k.clone(), values[i].clone())).collect();
        let losses = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                Node::SoftmaxCrossEntropy { head, .. } => Some((head.clone(), values[i].data()[0])),
                _ => None,
            })
            .collect();
        Ok((ForwardOutput { outputs, losses }, param_grads))
    }

    /// Rewrites the graph in place. Used by `pack` to rename ports.
    pub(crate) fn rename_ports(&mut self, rename: &BTreeMap<String, String>) -> Result<(), GraphError> {
        let map = |s: &mut String| {
            if let Some(n) = rename.get(s) {
                *s = n.clone();
            }
        };
        for node in &mut self.nodes {
            match node {
                Node::Input { port } => map(port),
                Node::SoftmaxCrossEntropy { labels, mask, .. } => {
                    map(labels);
                    if let Some(m) = mask {
                        map(m);
                    }
                }
                _ => {}
            }
        }
        let mut ports: Vec<InputPort> = Vec::new();
        for mut p in std::mem::take(&mut self.input_ports) {
            map(&mut p.name);
            match ports.iter().find(|q| q.name == p.name) {
                Some(q) if q.kind != p.kind || q.width != p.width => {
                    return Err(GraphError::PortMismatch {
                        port: p.name,
                        reason: "merged ports disagree on kind or width".into(),
                    });
                }
                Some(_) => {}
                None => ports.push(p),
            }
        }
        self.input_ports = ports;
        self.widths()?;
        Ok(())
    }

    pub(crate) fn from_parts(
        model_id: String,
        input_ports: Vec<InputPort>,
        nodes: Vec<Node>,
        outputs: BTreeMap<String, usize>,
        param_shapes: BTreeMap<String, Vec<usize>>,
        parameters: ParamMap,
    ) -> Result<Self, GraphError> {
        let mut g = Self::new(model_id, input_ports, nodes, outputs, param_shapes)?;
        if !parameters.is_empty() {
            g.set_parameters(parameters)?;
        }
        Ok(g)
    }

    pub(crate) fn set_binding(&mut self, binding: &str) {
        for p in &mut self.input_ports {
            p.binding = Some(binding.to_string());
        }
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (rows, inw, outw) = (x.rows(), x.cols(), w.shape()[1]);
    let wd = w.data();
    let mut out = vec![0.0; rows * outw];
    for r in 0..rows {
        let xr = x.row(r);
        let o = &mut out[r * outw..(r + 1) * outw];
        for (k, &xv) in xr.iter().enumerate().take(inw) {
            let wr = &wd[k * outw..(k + 1) * outw];
            for (oj, &wv) in o.iter_mut().zip(wr) {
                *oj += xv * wv;
            }
        }
        for (oj, &bv) in o.iter_mut().zip(b.data()) {
            *oj += bv;
        }
    }
    Tensor::new(vec![rows, outw], out).expect("affine shape")
}

/// Mean cross-entropy over unmasked rows and its gradient w.r.t. the logits.
fn softmax_xent(logits: &Tensor, labels: &Tensor, mask: Option<&Tensor>) -> Result<(f64, Tensor), GraphError> {
    let (rows, classes) = (logits.rows(), logits.cols());
    let weight = |r: usize| mask.map_or(1.0, |m| m.data()[r]);
    let denom: f64 = (0..rows).map(weight).sum();
    let mut grad = vec![0.0; rows * classes];
    if denom == 0.0 {
        return Ok((0.0, Tensor::new(vec![rows, classes], grad)?));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let wr = weight(r);
        if wr == 0.0 {
            continue;
        }
        let label = labels.data()[r];
        if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
            return Err(GraphError::BadLabel { row: r, label, classes });
        }
        let y = label as usize;
        let z = logits.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += wr * (lse - z[y]);
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = wr * (p - onehot) / denom;
        }
    }
    Ok((total / denom, Tensor::new(vec![rows, classes], grad)?))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Convenience: builds a labels tensor from class indices.
pub fn labels_tensor(labels: &[u32]) -> Tensor {
    Tensor::new(vec![labels.len(), 1], labels.iter().map(|&l| f64::from(l)).collect()).expect("non-empty labels")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp(id: &str, act: Activation) -> ComputationGraph {
        let spec = MlpSpec { input_dim: 4, hidden: vec![5], classes: 3, activation: act };
        let mut g = ComputationGraph::mlp(id, &spec).unwrap();
        g.initialize(7);
        g
    }

    fn feed(rows: usize, dim: usize) -> Feed {
        let x: Vec<f64> = (0..rows * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        let y: Vec<u32> = (0..rows).map(|i| (i % 3) as u32).collect();
        Feed::from([("x".into(), Tensor::new(vec![rows, dim], x).unwrap()), ("y".into(), labels_tensor(&y))])
    }

    #[test]
    fn identity_graph_passes_input_through() {
        let ports = vec![InputPort { name: "x".into(), kind: PortKind::Features, width: 3, binding: None }];
        let g = ComputationGraph::new(
            "id",
            ports,
            vec![Node::Input { port: "x".into() }],
            BTreeMap::from([("out".into(), 0)]),
            BTreeMap::new(),
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = g.forward(&Feed::from([("x".into(), x.clone())])).unwrap();
        assert_eq!(out.outputs["out"], x);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn zero_weights_give_uniform_softmax_and_closed_form_bias_gradient() {
        let spec = MlpSpec { input_dim: 4, hidden: vec![], classes: 5, activation: Activation::Relu };
        let mut g = ComputationGraph::mlp("zero", &spec).unwrap();
        let zeros = g.param_shapes().iter().map(|(k, s)| (k.clone(), Tensor::zeros(s.clone()))).collect();
        g.set_parameters(zeros).unwrap();
        let f = feed(1, 4);
        let (out, grads) = g.backward(&f, Heads::All).unwrap();
        assert!(out.outputs["logits"].data().iter().all(|&v| v == 0.0));
        assert!((out.losses["loss"] - 5f64.ln()).abs() < 1e-15);
        // single row with label 0
        let expected: Vec<f64> = (0..5).map(|j| 0.2 - if j == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(grads["dense0.bias"].data(), expected.as_slice());
    }

    #[test]
    fn feed_errors_name_the_port() {
        let g = small_mlp("m", Activation::Tanh);
        let mut f = feed(3, 4);
        f.insert("x".into(), Tensor::zeros(vec![3, 2]));
        match g.forward(&f) {
            Err(GraphError::PortMismatch { port, .. }) => assert_eq!(port, "x"),
            other => panic!("unexpected {other:?}"),
        }
        let mut f = feed(3, 4);
        f.remove("y");
        assert!(matches!(g.forward(&f), Err(GraphError::PortMismatch { port, .. }) if port == "y"));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let g = small_mlp("m", Activation::Relu);
        let mut f = feed(2, 4);
        f.insert("y".into(), labels_tensor(&[0, 3]));
        assert!(matches!(g.forward(&f), Err(GraphError::BadLabel { row: 1, .. })));
    }

    #[test]
    fn init_is_keyed_by_model_id_and_seed() {
        let a = small_mlp("alpha", Activation::Relu);
        let b = small_mlp("alpha", Activation::Relu);
        let c = small_mlp("beta", Activation::Relu);
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters()["dense0.weight"], c.parameters()["dense0.weight"]);
    }

    #[test]
    fn xavier_bound_holds() {
        let spec = MlpSpec { input_dim: 4, hidden: vec![4], classes: 4, activation: Activation::Relu };
        let g = ComputationGraph::mlp("x", &spec).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        for seed in 0..20 {
            let p = g.init_parameters(seed);
            for v in p["dense0.weight"].data().iter().chain(p["dense1.weight"].data()) {
                assert!(v.abs() <= bound);
            }
        }
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradients_unchanged() {
        let g = small_mlp("dup", Activation::Sigmoid);
        let f = feed(4, 4);
        let mut doubled = Feed::new();
        for (k, t) in &f {
            let mut data = t.data().to_vec();
            data.extend_from_slice(t.data());
            doubled.insert(k.clone(), Tensor::new(vec![t.rows() * 2, t.cols()], data).unwrap());
        }
        let (_, g1) = g.backward(&f, Heads::All).unwrap();
        let (_, g2) = g.backward(&doubled, Heads::All).unwrap();
        for (k, t) in &g1 {
            assert!(t.max_abs_diff(&g2[k]).unwrap() <= 1e-12, "{k}");
        }
    }

    #[test]
    fn masked_rows_are_inert() {
        let g = small_mlp("mask", Activation::LeakyRelu);
        let spec_ports = g.input_ports().to_vec();
        let mut ports = spec_ports.clone();
        ports.push(InputPort { name: "m".into(), kind: PortKind::Mask, width: 1, binding: None });
        let mut nodes = g.nodes().to_vec();
        if let Some(Node::SoftmaxCrossEntropy { mask, .. }) = nodes.last_mut() {
            *mask = Some("m".into());
        }
        let mut masked = ComputationGraph::from_parts(
            "mask".into(),
            ports,
            nodes,
            g.outputs().clone(),
            g.param_shapes().clone(),
            g.parameters().clone(),
        )
        .unwrap();
        masked.set_parameters(g.parameters().clone()).unwrap();
        let f = feed(3, 4);
        let (o1, g1) = g.backward(&f, Heads::All).unwrap();
        let mut padded = Feed::new();
        let mut x = f["x"].data().to_vec();
        x.extend([0.0; 8]);
        padded.insert("x".into(), Tensor::new(vec![5, 4], x).unwrap());
        padded.insert("y".into(), labels_tensor(&[0, 1, 2, 0, 0]));
        padded.insert("m".into(), Tensor::new(vec![5, 1], vec![1.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let (o2, g2) = masked.backward(&padded, Heads::All).unwrap();
        assert_eq!(o1.losses["loss"], o2.losses["loss"]);
        assert_eq!(g1, g2);
    }

    #[test]
    fn cycles_and_forward_references_are_rejected() {
        let ports = vec![InputPort { name: "x".into(), kind: PortKind::Features, width: 2, binding: None }];
        let nodes = vec![Node::Input { port: "x".into() }, Node::Activation { input: 1, kind: Activation::Relu }];
        let err = ComputationGraph::new("c", ports, nodes, BTreeMap::from([("o".into(), 1)]), BTreeMap::new());
        assert!(matches!(err, Err(GraphError::BadNode { node: 1, .. })));
    }

    #[test]
    fn unreachable_parameters_are_rejected() {
        let spec = MlpSpec { input_dim: 2, hidden: vec![], classes: 2, activation: Activation::Relu };
        let g = ComputationGraph::mlp("u", &spec).unwrap();
        let mut shapes = g.param_shapes().clone();
        shapes.insert("orphan".into(), vec![1]);
        let err = ComputationGraph::new("u", g.input_ports().to_vec(), g.nodes().to_vec(), g.outputs().clone(), shapes);
        assert!(matches!(err, Err(GraphError::UnreachableParameter(n)) if n == "orphan"));
    }
}
