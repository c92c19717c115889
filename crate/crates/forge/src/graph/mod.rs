//! Explicit DAG intermediate representation for networks.
//!
//! A [`Graph`] is a set of [`Node`]s joined by slot-addressed edges, built
//! from a declarative JSON description ([`schema`]), statically shape-checked
//! ([`shapes`]), and evaluated forward/backward by the executor ([`exec`]).
//! Conversion passes rewrite graphs copy-on-write; executing never mutates
//! one.

pub mod exec;
pub mod schema;
pub mod shapes;


use crate::error::{ForgeError, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Layer kinds understood by the executor and the passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Output,
    Conv2d,
    DepthwiseConv2d,
    Linear,
    BatchNorm,
    ReLU,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Add,
    Concat,
    Flatten,
    Identity,
    SuperNetCombiner,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "Input",
            OpKind::Output => "Output",
            OpKind::Conv2d => "Conv2d",
            OpKind::DepthwiseConv2d => "DepthwiseConv2d",
            OpKind::Linear => "Linear",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::ReLU => "ReLU",
            OpKind::MaxPool => "MaxPool",
            OpKind::AvgPool => "AvgPool",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Add => "Add",
            OpKind::Concat => "Concat",
            OpKind::Flatten => "Flatten",
            OpKind::Identity => "Identity",
            OpKind::SuperNetCombiner => "SuperNetCombiner",
        }
    }

    pub fn from_name(s: &str) -> Option<OpKind> {
        Some(match s {
            "Input" => OpKind::Input,
            "Output" => OpKind::Output,
            "Conv2d" => OpKind::Conv2d,
            "DepthwiseConv2d" => OpKind::DepthwiseConv2d,
            "Linear" => OpKind::Linear,
            "BatchNorm" => OpKind::BatchNorm,
            "ReLU" => OpKind::ReLU,
            "MaxPool" => OpKind::MaxPool,
            "AvgPool" => OpKind::AvgPool,
            "GlobalAvgPool" => OpKind::GlobalAvgPool,
            "Add" => OpKind::Add,
            "Concat" => OpKind::Concat,
            "Flatten" => OpKind::Flatten,
            "Identity" => OpKind::Identity,
            "SuperNetCombiner" => OpKind::SuperNetCombiner,
            _ => return None,
        })
    }

    /// Layers whose weights the optimization methods target.
    pub fn is_target(&self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::Linear)
    }

    /// Kinds that pass their input channel count through unchanged.
    pub fn is_channel_transparent(&self) -> bool {
        matches!(
            self,
            OpKind::DepthwiseConv2d
                | OpKind::BatchNorm
                | OpKind::ReLU
                | OpKind::MaxPool
                | OpKind::AvgPool
                | OpKind::GlobalAvgPool
                | OpKind::Add
                | OpKind::Identity
                | OpKind::Output
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwConvParams {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub num_features: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

/// Kind-specific static hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Params {
    None,
    /// Per-sample shape, batch axis excluded: [C,H,W] or [F].
    Input { shape: Vec<usize> },
    Conv(ConvParams),
    DwConv(DwConvParams),
    Linear(LinearParams),
    BatchNorm(BatchNormParams),
    Pool(PoolParams),
    Concat { axis: usize },
    /// Expanded supernet module: node ids of each branch, in slot order.
    Combiner { branches: Vec<Vec<String>> },
}

/// Batch-norm parameters absorbed into a preceding layer, kept so the fold
/// can be undone.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedBn<S: Scalar> {
    /// Id of the removed BatchNorm node, restored verbatim on unfold.
    pub bn_id: String,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
    pub had_bias: bool,
}

/// Quantization frozen at export: the layer runs fake-quantized at these
/// settings from now on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedQuant {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_alpha: Option<f64>,
}

/// Link from a node to the predecessor(s) that define its output channel
/// count, written by the calculator-attachment pass.
#[derive(Debug, Clone, PartialEq)]
pub enum ChanSrc {
    /// The node defines its own output channels (Conv/Linear).
    Own,
    /// Fixed static channel count (graph inputs, combiners).
    Fixed(usize),
    /// Channel-transparent: follows the named channel-defining node.
    Follow(String),
    /// Flatten: source channels times a spatial multiplier.
    FlattenOf { src: String, k: usize },
    /// Concat: sum of the named channel-defining nodes.
    ConcatOf(Vec<String>),
}

/// Open annotations written by the conversion passes.
#[derive(Debug, Clone, Default)]
pub struct Annotations<S: Scalar> {
    /// Channel mask group this target belongs to.
    pub mask_group: Option<String>,
    /// Effective-shape calculator link.
    pub chan_src: Option<ChanSrc>,
    /// Saved parameters of a folded batch norm.
    pub folded_bn: Option<FoldedBn<S>>,
    /// Quantization frozen at export.
    pub quant: Option<FixedQuant>,
}

impl<S: Scalar> Annotations<S> {
    fn empty() -> Self {
        Annotations { mask_group: None, chan_src: None, folded_bn: None, quant: None }
    }
}

#[derive(Debug, Clone)]
pub struct Node<S: Scalar = f32> {
    pub id: String,
    pub kind: OpKind,
    pub params: Params,
    pub weights: BTreeMap<String, Tensor<S>>,
    pub ann: Annotations<S>,
}

impl<S: Scalar> Node<S> {
    pub fn new(id: impl Into<String>, kind: OpKind, params: Params) -> Self {
        Node { id: id.into(), kind, params, weights: BTreeMap::new(), ann: Annotations::empty() }
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<S>> {
        self.weights.get(name).ok_or_else(|| {
            ForgeError::runtime(format!("node '{}' is missing weight '{}'", self.id, name))
        })
    }

    /// Number of inputs this node consumes.
    pub fn arity(&self) -> Option<usize> {
        match self.kind {
            OpKind::Input => Some(0),
            OpKind::Add | OpKind::Concat => None, // variadic, >= 2
            OpKind::SuperNetCombiner => match &self.params {
                Params::Combiner { branches } => Some(branches.len()),
                _ => Some(0),
            },
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub slot: usize,
}

/// A validated DAG of layers.
#[derive(Debug, Clone, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    index: HashMap<String, usize>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Set once the batch-norm folding pass has run.
    pub bn_folded: bool,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            bn_folded: false,
        }
    }

    pub fn add_node(&mut self, node: Node<S>) -> Result<()> {
        if self.index.contains_key(&node.id) {
            return Err(ForgeError::graph(format!("duplicate node id '{}'", node.id)));
        }
        self.index.insert(node.id.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_edge(&mut self, src: impl Into<String>, dst: impl Into<String>, slot: usize) {
        self.edges.push(Edge { src: src.into(), dst: dst.into(), slot });
    }

    pub fn node(&self, id: &str) -> Result<&Node<S>> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| ForgeError::graph(format!("unknown node '{}'", id)))
    }

    pub fn node_mut(&mut self, id: &str) -> Result<&mut Node<S>> {
        match self.index.get(id) {
            Some(&i) => Ok(&mut self.nodes[i]),
            None => Err(ForgeError::graph(format!("unknown node '{}'", id))),
        }
    }

    pub fn has_node(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<S>] {
        &mut self.nodes
    }

    /// Producers of a node's inputs, ordered by slot.
    pub fn producers(&self, id: &str) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self
            .edges
            .iter()
            .filter(|e| e.dst == id)
            .map(|e| (e.src.clone(), e.slot))
            .collect();
        v.sort_by_key(|(_, slot)| *slot);
        v
    }

    /// Ids of nodes consuming this node's output, in edge order.
    pub fn consumers(&self, id: &str) -> Vec<String> {
        self.edges.iter().filter(|e| e.src == id).map(|e| e.dst.clone()).collect()
    }

    /// Remove a node and every edge touching it.
    pub fn remove_node(&mut self, id: &str) -> Result<Node<S>> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| ForgeError::graph(format!("unknown node '{}'", id)))?;
        let node = self.nodes.remove(i);
        self.index.remove(id);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        self.edges.retain(|e| e.src != id && e.dst != id);
        Ok(node)
    }

    /// Deterministic topological order (stable w.r.t. node insertion order).
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            let di = *self
                .index
                .get(&e.dst)
                .ok_or_else(|| ForgeError::graph(format!("edge into unknown node '{}'", e.dst)))?;
            if !self.index.contains_key(&e.src) {
                return Err(ForgeError::graph(format!("edge from unknown node '{}'", e.src)));
            }
            indeg[di] += 1;
        }
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        while let Some(i) = ready.first().copied() {
            ready.remove(0);
            order.push(self.nodes[i].id.clone());
            let mut newly = Vec::new();
            for e in &self.edges {
                if e.src == self.nodes[i].id {
                    let di = self.index[&e.dst];
                    indeg[di] -= 1;
                    if indeg[di] == 0 {
                        newly.push(di);
                    }
                }
            }
            newly.sort_unstable();
            for d in newly {
                let pos = ready.partition_point(|&r| r < d);
                ready.insert(pos, d);
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = self
                .nodes
                .iter()
                .filter(|nd| !order.contains(&nd.id))
                .map(|nd| nd.id.as_str())
                .collect();
            return Err(ForgeError::graph(format!("cycle involving nodes {:?}", stuck)));
        }
        Ok(order)
    }

    /// Structural validation: wiring arity, positive hyper-parameters,
    /// declared inputs/outputs, weight shapes (when present), acyclicity and
    /// shape consistency.
    pub fn validate(&self) -> Result<()> {
        for id in &self.inputs {
            if self.node(id)?.kind != OpKind::Input {
                return Err(ForgeError::graph(format!("declared input '{}' is not an Input node", id)));
            }
        }
        for id in &self.outputs {
            if self.node(id)?.kind != OpKind::Output {
                return Err(ForgeError::graph(format!("declared output '{}' is not an Output node", id)));
            }
        }
        for node in &self.nodes {
            self.validate_node(node)?;
        }
        self.topo_order()?;
        shapes::infer_shapes(self, 1)?;
        Ok(())
    }

    fn validate_node(&self, node: &Node<S>) -> Result<()> {
        let prods = self.producers(&node.id);
        for (i, (_, slot)) in prods.iter().enumerate() {
            if *slot != i {
                return Err(ForgeError::graph(format!(
                    "node '{}' input slots are not contiguous",
                    node.id
                )));
            }
        }
        match node.arity() {
            Some(a) if prods.len() != a => {
                return Err(ForgeError::graph(format!(
                    "node '{}' ({}) expects {} inputs, has {}",
                    node.id,
                    node.kind.name(),
                    a,
                    prods.len()
                )));
            }
            None if prods.len() < 2 => {
                return Err(ForgeError::graph(format!(
                    "node '{}' ({}) needs at least 2 inputs",
                    node.id,
                    node.kind.name()
                )));
            }
            _ => {}
        }
        // Positive hyper-parameters.
        let positive = |v: usize, what: &str| -> Result<()> {
            if v == 0 {
                Err(ForgeError::graph(format!("node '{}': {} must be positive", node.id, what)))
            } else {
                Ok(())
            }
        };
        match (&node.kind, &node.params) {
            (OpKind::Conv2d, Params::Conv(p)) => {
                positive(p.in_channels, "in_channels")?;
                positive(p.out_channels, "out_channels")?;
                positive(p.kernel.0, "kernel")?;
                positive(p.kernel.1, "kernel")?;
                positive(p.stride.0, "stride")?;
                positive(p.stride.1, "stride")?;
                positive(p.groups, "groups")?;
                if p.in_channels % p.groups != 0 || p.out_channels % p.groups != 0 {
                    return Err(ForgeError::graph(format!(
                        "node '{}': groups {} must divide channels {}->{}",
                        node.id, p.groups, p.in_channels, p.out_channels
                    )));
                }
                if let Ok(w) = node.weight("weight") {
                    let expect =
                        [p.out_channels, p.in_channels / p.groups, p.kernel.0, p.kernel.1];
                    if w.shape() != expect {
                        return Err(ForgeError::graph(format!(
                            "node '{}': weight shape {:?}, expected {:?}",
                            node.id,
                            w.shape(),
                            expect
                        )));
                    }
                }
            }
            (OpKind::DepthwiseConv2d, Params::DwConv(p)) => {
                positive(p.channels, "channels")?;
                positive(p.kernel.0, "kernel")?;
                positive(p.stride.0, "stride")?;
                if let Ok(w) = node.weight("weight") {
                    let expect = [p.channels, 1, p.kernel.0, p.kernel.1];
                    if w.shape() != expect {
                        return Err(ForgeError::graph(format!(
                            "node '{}': weight shape {:?}, expected {:?}",
                            node.id,
                            w.shape(),
                            expect
                        )));
                    }
                }
            }
            (OpKind::Linear, Params::Linear(p)) => {
                positive(p.in_features, "in_features")?;
                positive(p.out_features, "out_features")?;
                if let Ok(w) = node.weight("weight") {
                    if w.shape() != [p.out_features, p.in_features] {
                        return Err(ForgeError::graph(format!(
                            "node '{}': weight shape {:?}, expected [{}, {}]",
                            node.id,
                            w.shape(),
                            p.out_features,
                            p.in_features
                        )));
                    }
                }
            }
            (OpKind::BatchNorm, Params::BatchNorm(p)) => {
                positive(p.num_features, "num_features")?;
            }
            (OpKind::MaxPool | OpKind::AvgPool, Params::Pool(p)) => {
                positive(p.kernel.0, "kernel")?;
                positive(p.stride.0, "stride")?;
            }
            (OpKind::Input, Params::Input { shape }) => {
                if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                    return Err(ForgeError::graph(format!(
                        "node '{}': input shape {:?} must be non-empty and positive",
                        node.id, shape
                    )));
                }
            }
            (OpKind::Concat, Params::Concat { .. }) => {}
            (OpKind::SuperNetCombiner, Params::Combiner { branches }) => {
                if branches.len() < 2 {
                    return Err(ForgeError::graph(format!(
                        "node '{}': supernet module needs at least 2 branches",
                        node.id
                    )));
                }
            }
            (
                OpKind::ReLU
                | OpKind::GlobalAvgPool
                | OpKind::Flatten
                | OpKind::Identity
                | OpKind::Add
                | OpKind::Output,
                Params::None,
            ) => {}
            (k, p) => {
                return Err(ForgeError::graph(format!(
                    "node '{}': params {:?} do not fit kind {}",
                    node.id,
                    p,
                    k.name()
                )));
            }
        }
        Ok(())
    }

    /// Element-wise cast of every weight (used by the 64-bit check mode).
    pub fn cast<T: Scalar>(&self) -> Graph<T> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    id: n.id.clone(),
                    kind: n.kind,
                    params: n.params.clone(),
                    weights: n.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
                    ann: Annotations {
                        mask_group: n.ann.mask_group.clone(),
                        chan_src: n.ann.chan_src.clone(),
                        folded_bn: n.ann.folded_bn.as_ref().map(|f| FoldedBn {
                            bn_id: f.bn_id.clone(),
                            gamma: f.gamma.cast(),
                            beta: f.beta.cast(),
                            mean: f.mean.cast(),
                            var: f.var.cast(),
                            eps: f.eps,
                            momentum: f.momentum,
                            had_bias: f.had_bias,
                        }),
                        quant: n.ann.quant.clone(),
                    },
                })
                .collect(),
            index: self.index.clone(),
            edges: self.edges.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            bn_folded: self.bn_folded,
        }
    }

    /// Ordered list of (name, tensor) pairs for checkpointing, named
    /// `<node id>.<weight name>`, in node insertion order.
    pub fn named_weights(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for (wname, w) in &node.weights {
                out.push((format!("{}.{}", node.id, wname), w.clone()));
            }
        }
        out
    }

    /// Static output channel count of a node (axis 1 of its output shape),
    /// from a shape map produced by [`shapes::infer_shapes`].
    pub fn static_channels(shape: &[usize]) -> usize {
        if shape.len() >= 2 {
            shape[1]
        } else {
            shape[0]
        }
    }
}

/// Kaiming-uniform initialization for every missing weight, deterministic in
/// node insertion order. Existing weights are left alone.
pub fn init_weights<S: Scalar>(g: &mut Graph<S>, rng: &mut impl rand::Rng) {
    use rand::distributions::{Distribution, Uniform};
    let ids: Vec<String> = g.nodes().iter().map(|n| n.id.clone()).collect();
    for id in ids {
        let node = g.node_mut(&id).expect("iterating existing ids");
        let fill = |shape: Vec<usize>, bound: f64, rng: &mut dyn rand::RngCore| -> Tensor<S> {
            let dist = Uniform::new(-bound, bound);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
            Tensor::from_vec(shape, data).expect("init shape")
        };
        match (&node.kind, node.params.clone()) {
            (OpKind::Conv2d, Params::Conv(p)) => {
                let fan_in = (p.in_channels / p.groups * p.kernel.0 * p.kernel.1) as f64;
                let shape = vec![p.out_channels, p.in_channels / p.groups, p.kernel.0, p.kernel.1];
                if !node.weights.contains_key("weight") {
                    let w = fill(shape, (6.0 / fan_in).sqrt(), rng);
                    node.weights.insert("weight".into(), w);
                }
                if p.bias && !node.weights.contains_key("bias") {
                    node.weights.insert("bias".into(), Tensor::zeros(&[p.out_channels]));
                }
            }
            (OpKind::DepthwiseConv2d, Params::DwConv(p)) => {
                let fan_in = (p.kernel.0 * p.kernel.1) as f64;
                if !node.weights.contains_key("weight") {
                    let w = fill(vec![p.channels, 1, p.kernel.0, p.kernel.1], (6.0 / fan_in).sqrt(), rng);
                    node.weights.insert("weight".into(), w);
                }
                if p.bias && !node.weights.contains_key("bias") {
                    node.weights.insert("bias".into(), Tensor::zeros(&[p.channels]));
                }
            }
            (OpKind::Linear, Params::Linear(p)) => {
                if !node.weights.contains_key("weight") {
                    let w = fill(vec![p.out_features, p.in_features], (6.0 / p.in_features as f64).sqrt(), rng);
                    node.weights.insert("weight".into(), w);
                }
                if p.bias && !node.weights.contains_key("bias") {
                    node.weights.insert("bias".into(), Tensor::zeros(&[p.out_features]));
                }
            }
            (OpKind::BatchNorm, Params::BatchNorm(p)) => {
                let c = p.num_features;
                node.weights.entry("gamma".into()).or_insert_with(|| Tensor::ones(&[c]));
                node.weights.entry("beta".into()).or_insert_with(|| Tensor::zeros(&[c]));
                node.weights.entry("running_mean".into()).or_insert_with(|| Tensor::zeros(&[c]));
                node.weights.entry("running_var".into()).or_insert_with(|| Tensor::ones(&[c]));
            }
            (OpKind::SuperNetCombiner, Params::Combiner { branches }) => {
                let m = branches.len();
                node.weights.entry("theta".into()).or_insert_with(|| Tensor::zeros(&[m]));
            }
            _ => {}
        }
    }
}

/// Apply checkpointed arrays back onto graph weights (`<node>.<weight>` keys).
/// Unknown names are returned for the caller (method states claim them).
pub fn load_named_weights<S: Scalar>(
    g: &mut Graph<S>,
    arrays: Vec<(String, Tensor<S>)>,
) -> Result<Vec<(String, Tensor<S>)>> {
    let mut rest = Vec::new();
    for (name, t) in arrays {
        // Node ids may contain dots; try longest matching node id first.
        let mut matched = false;
        for split in (1..name.len()).rev() {
            if !name.is_char_boundary(split) {
                continue;
            }
            let (node_id, w) = name.split_at(split);
            if let Some(wname) = w.strip_prefix('.') {
                if g.has_node(node_id) {
                    g.node_mut(node_id)?.weights.insert(wname.to_string(), t.clone());
                    matched = true;
                    break;
                }
            }
        }
        if !matched {
            rest.push((name, t));
        }
    }
    Ok(rest)
}
