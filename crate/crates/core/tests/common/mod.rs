//! Oracles shared by the acceptance run and the property tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use packtrain::graph::{labels_tensor, Activation, ComputationGraph, Feed, Heads, InputPort, Node, PortKind};
use packtrain::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random dense classifier with 0 to 3 hidden layers of 1 to 16 units, a
/// random activation per layer and, when it has two hidden layers or more,
/// an optional skip concatenation into the head.
pub fn random_graph(rng: &mut ChaCha8Rng, id: &str) -> ComputationGraph {
    let input = rng.random_range(1..=6usize);
    let classes = rng.random_range(2..=5usize);
    let depth = rng.random_range(0..=3usize);
    let mut nodes = vec![Node::Input { port: "x".into() }];
    let mut shapes = BTreeMap::new();
    let mut width = input;
    let mut last = 0;
    let mut hidden_outputs = Vec::new();
    for layer in 0..depth {
        let out = rng.random_range(1..=16usize);
        let (w, b) = (format!("l{layer}.w"), format!("l{layer}.b"));
        shapes.insert(w.clone(), vec![width, out]);
        shapes.insert(b.clone(), vec![out]);
        nodes.push(Node::Affine { input: last, weight: w, bias: b, owner: id.into(), layer });
        let kind = Activation::ALL[rng.random_range(0..4)];
        nodes.push(Node::Activation { input: nodes.len() - 1, kind });
        last = nodes.len() - 1;
        hidden_outputs.push((last, out));
        width = out;
    }
    if depth >= 2 && rng.random_bool(0.5) {
        let (first, w0) = hidden_outputs[0];
        nodes.push(Node::Concat { inputs: vec![first, last] });
        last = nodes.len() - 1;
        width += w0;
    }
    shapes.insert("head.w".into(), vec![width, classes]);
    shapes.insert("head.b".into(), vec![classes]);
    nodes.push(Node::Affine {
        input: last,
        weight: "head.w".into(),
        bias: "head.b".into(),
        owner: id.into(),
        layer: depth,
    });
    let logits = nodes.len() - 1;
    nodes.push(Node::SoftmaxCrossEntropy { head: "loss".into(), logits, labels: "y".into(), mask: None });
    let ports = vec![
        InputPort { name: "x".into(), kind: PortKind::Features, width: input, binding: None },
        InputPort { name: "y".into(), kind: PortKind::Labels, width: 1, binding: None },
    ];
    let mut g = ComputationGraph::new(id, ports, nodes, BTreeMap::from([("logits".into(), logits)]), shapes).unwrap();
    g.initialize(rng.random());
    // Zero biases put pre-activations exactly on the ReLU kink whenever a
    // layer's input row is all zeros; finite differences are undefined there.
    let mut params = g.parameters().clone();
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    g.set_parameters(params).unwrap();
    g
}

pub fn random_feed(rng: &mut ChaCha8Rng, g: &ComputationGraph, rows: usize) -> Feed {
    let width = g.input_ports()[0].width;
    let classes = g.param_shapes()["head.b"][0];
    let x: Vec<f64> = (0..rows * width).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<u32> = (0..rows).map(|_| rng.random_range(0..classes as u32)).collect();
    BTreeMap::from([("x".into(), Tensor::new(vec![rows, width], x).unwrap()), ("y".into(), labels_tensor(&y))])
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_FLOOR: f64 = 1e-5;

/// Error between an analytic and a numeric derivative, relative to the
/// larger magnitude. A central difference at `FD_STEP` carries about 1e-9
/// of rounding noise on O(1) losses, so magnitudes are floored at
/// `GRAD_FLOOR`; smaller derivatives are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error between backward and central differences over
/// every parameter element.
pub fn max_gradient_error(g: &ComputationGraph, feed: &Feed) -> f64 {
    let (_, grads) = g.backward(feed, Heads::All).unwrap();
    let loss = |params: BTreeMap<String, Tensor>| {
        let mut probe = g.clone();
        probe.set_parameters(params).unwrap();
        probe.forward(feed).unwrap().losses["loss"]
    };
    let mut worst: f64 = 0.0;
    for (name, t) in g.parameters() {
        for i in 0..t.len() {
            let mut plus = g.parameters().clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = g.parameters().clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (loss(plus) - loss(minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[name].data()[i], numeric));
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_param_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter().map(|(k, t)| t.max_abs_diff(&b[k]).unwrap()).fold(0.0, f64::max)
}
