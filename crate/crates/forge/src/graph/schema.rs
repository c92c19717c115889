//! Declarative JSON graph descriptions.
//!
//! ```json
//! {
//!   "inputs": ["in"],
//!   "nodes": [
//!     {"id": "in",  "kind": "Input",  "params": {"shape": [1, 16, 16]}},
//!     {"id": "c1",  "kind": "Conv2d", "params": {"in_channels": 1, "out_channels": 8,
//!                                                "kernel": [3, 3], "padding": [1, 1]}},
//!     {"id": "sn",  "kind": "SuperNetCombiner",
//!      "supernet_branches": [
//!        [{"id": "a", "kind": "Conv2d", "params": {...}}],
//!        [{"id": "b", "kind": "Identity"}]
//!      ]},
//!     {"id": "out", "kind": "Output"}
//!   ],
//!   "edges": [["in", "c1", 0], ["c1", "sn", 0], ["sn", "out", 0]],
//!   "outputs": ["out"]
//! }
//! ```
//!
//! A node carrying `supernet_branches` declares a supernet module: each branch
//! is a chain of node descriptions sharing the module's single input. Parsing
//! expands branches into parallel paths feeding a `SuperNetCombiner` node that
//! keeps the module's id; branch node ids are prefixed `<module>.b<i>.`.
//! Already-expanded combiners (with `params.branches`) round-trip unchanged.
//!
//! Weights are not part of the JSON; they travel in checkpoints keyed
//! `<node id>.<weight name>`. Exported graphs may carry a per-node `"quant"`
//! annotation recording frozen fake-quantization settings.

use super::{
    BatchNormParams, ConvParams, DwConvParams, FixedQuant, Graph, LinearParams, Node, OpKind,
    Params, PoolParams,
};
use crate::error::{ForgeError, Result};
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Serialize, Deserialize)]
struct RawGraph {
    inputs: Vec<String>,
    nodes: Vec<RawNode>,
    edges: Vec<(String, String, usize)>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawNode {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supernet_branches: Option<Vec<Vec<RawNode>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<FixedQuant>,
}

/// Parse and validate a JSON graph description, expanding supernet modules.
pub fn parse_graph<S: Scalar>(text: &str) -> Result<Graph<S>> {
    let raw: RawGraph = serde_json::from_str(text)?;
    let mut g = Graph::new();
    g.inputs = raw.inputs;
    g.outputs = raw.outputs;
    for e in raw.edges {
        g.add_edge(e.0, e.1, e.2);
    }
    for rn in raw.nodes {
        add_raw_node(&mut g, rn)?;
    }
    g.validate()?;
    Ok(g)
}

fn add_raw_node<S: Scalar>(g: &mut Graph<S>, rn: RawNode) -> Result<()> {
    let kind = OpKind::from_name(&rn.kind)
        .ok_or_else(|| ForgeError::config(format!("node '{}': unknown op kind '{}'", rn.id, rn.kind)))?;

    if let Some(branches) = rn.supernet_branches {
        if kind != OpKind::SuperNetCombiner {
            return Err(ForgeError::config(format!(
                "node '{}': supernet_branches only allowed on SuperNetCombiner, not {}",
                rn.id, rn.kind
            )));
        }
        return expand_supernet(g, &rn.id, branches);
    }

    let params = parse_params(&rn.id, kind, rn.params.as_ref())?;
    let mut node = Node::new(rn.id, kind, params);
    node.ann.quant = rn.quant;
    if let Params::Combiner { branches } = &node.params {
        let m = branches.len();
        node.weights.entry("theta".into()).or_insert_with(|| crate::tensor::Tensor::zeros(&[m]));
    }
    g.add_node(node)
}

/// Rewire the module's single input edge to each branch chain and join the
/// chain tails at a combiner node that keeps the module id.
fn expand_supernet<S: Scalar>(
    g: &mut Graph<S>,
    module_id: &str,
    branches: Vec<Vec<RawNode>>,
) -> Result<()> {
    if branches.len() < 2 {
        return Err(ForgeError::config(format!(
            "supernet module '{}' needs at least 2 branches",
            module_id
        )));
    }
    let feeds: Vec<usize> = (0..g.edges.len()).filter(|&i| g.edges[i].dst == module_id).collect();
    if feeds.len() != 1 {
        return Err(ForgeError::config(format!(
            "supernet module '{}' must have exactly one input edge, has {}",
            module_id,
            feeds.len()
        )));
    }
    let module_src = g.edges[feeds[0]].src.clone();
    g.edges.remove(feeds[0]);

    let mut branch_ids: Vec<Vec<String>> = Vec::new();
    for (bi, chain) in branches.into_iter().enumerate() {
        if chain.is_empty() {
            return Err(ForgeError::config(format!(
                "supernet module '{}': branch {} is empty (use an explicit Identity node)",
                module_id, bi
            )));
        }
        let mut ids = Vec::new();
        let mut prev = module_src.clone();
        for rn in chain {
            let kind = OpKind::from_name(&rn.kind).ok_or_else(|| {
                ForgeError::config(format!(
                    "supernet module '{}': unknown op kind '{}'",
                    module_id, rn.kind
                ))
            })?;
            if rn.supernet_branches.is_some() {
                return Err(ForgeError::config(format!(
                    "supernet module '{}': nested supernet modules are not supported",
                    module_id
                )));
            }
            let id = format!("{}.b{}.{}", module_id, bi, rn.id);
            let params = parse_params(&id, kind, rn.params.as_ref())?;
            g.add_node(Node::new(id.clone(), kind, params))?;
            g.add_edge(prev, id.clone(), 0);
            prev = id.clone();
            ids.push(id);
        }
        g.add_edge(prev, module_id.to_string(), bi);
        branch_ids.push(ids);
    }
    let m = branch_ids.len();
    let mut comb = Node::new(module_id, OpKind::SuperNetCombiner, Params::Combiner { branches: branch_ids });
    comb.weights.insert("theta".into(), crate::tensor::Tensor::zeros(&[m]));
    g.add_node(comb)
}

fn parse_params(id: &str, kind: OpKind, v: Option<&Value>) -> Result<Params> {
    let obj = v.cloned().unwrap_or(Value::Null);
    let err = |msg: String| ForgeError::config(format!("node '{}': {}", id, msg));

    let pair = |o: &Value, key: &str, default: Option<(usize, usize)>| -> Result<(usize, usize)> {
        match o.get(key) {
            Some(Value::Array(a)) if a.len() == 2 => {
                let x = a[0].as_u64().ok_or_else(|| err(format!("bad {}", key)))? as usize;
                let y = a[1].as_u64().ok_or_else(|| err(format!("bad {}", key)))? as usize;
                Ok((x, y))
            }
            Some(Value::Number(n)) => {
                let x = n.as_u64().ok_or_else(|| err(format!("bad {}", key)))? as usize;
                Ok((x, x))
            }
            None => default.ok_or_else(|| err(format!("missing '{}'", key))),
            _ => Err(err(format!("bad {}", key))),
        }
    };
    let int = |o: &Value, key: &str, default: Option<usize>| -> Result<usize> {
        match o.get(key) {
            Some(Value::Number(n)) => {
                Ok(n.as_u64().ok_or_else(|| err(format!("bad {}", key)))? as usize)
            }
            None => default.ok_or_else(|| err(format!("missing '{}'", key))),
            _ => Err(err(format!("bad {}", key))),
        }
    };
    let boolean = |o: &Value, key: &str, default: bool| -> Result<bool> {
        match o.get(key) {
            Some(Value::Bool(b)) => Ok(*b),
            None => Ok(default),
            _ => Err(err(format!("bad {}", key))),
        }
    };
    let float = |o: &Value, key: &str, default: f64| -> Result<f64> {
        match o.get(key) {
            Some(Value::Number(n)) => Ok(n.as_f64().ok_or_else(|| err(format!("bad {}", key)))?),
            None => Ok(default),
            _ => Err(err(format!("bad {}", key))),
        }
    };

    Ok(match kind {
        OpKind::Input => {
            let shape = obj
                .get("shape")
                .and_then(|s| s.as_array())
                .ok_or_else(|| err("Input needs params.shape".into()))?
                .iter()
                .map(|d| d.as_u64().map(|v| v as usize))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| err("bad shape".into()))?;
            Params::Input { shape }
        }
        OpKind::Conv2d => Params::Conv(ConvParams {
            in_channels: int(&obj, "in_channels", None)?,
            out_channels: int(&obj, "out_channels", None)?,
            kernel: pair(&obj, "kernel", None)?,
            stride: pair(&obj, "stride", Some((1, 1)))?,
            padding: pair(&obj, "padding", Some((0, 0)))?,
            groups: int(&obj, "groups", Some(1))?,
            bias: boolean(&obj, "bias", true)?,
        }),
        OpKind::DepthwiseConv2d => Params::DwConv(DwConvParams {
            channels: int(&obj, "channels", None)?,
            kernel: pair(&obj, "kernel", None)?,
            stride: pair(&obj, "stride", Some((1, 1)))?,
            padding: pair(&obj, "padding", Some((0, 0)))?,
            bias: boolean(&obj, "bias", true)?,
        }),
        OpKind::Linear => Params::Linear(LinearParams {
            in_features: int(&obj, "in_features", None)?,
            out_features: int(&obj, "out_features", None)?,
            bias: boolean(&obj, "bias", true)?,
        }),
        OpKind::BatchNorm => Params::BatchNorm(BatchNormParams {
            num_features: int(&obj, "num_features", None)?,
            eps: float(&obj, "eps", 1e-5)?,
            momentum: float(&obj, "momentum", 0.1)?,
        }),
        OpKind::MaxPool | OpKind::AvgPool => {
            let kernel = pair(&obj, "kernel", None)?;
            Params::Pool(PoolParams { kernel, stride: pair(&obj, "stride", Some(kernel))? })
        }
        OpKind::Concat => Params::Concat { axis: int(&obj, "axis", Some(1))? },
        OpKind::SuperNetCombiner => {
            let branches = obj
                .get("branches")
                .and_then(|b| serde_json::from_value::<Vec<Vec<String>>>(b.clone()).ok())
                .ok_or_else(|| err("pre-expanded combiner needs params.branches".into()))?;
            Params::Combiner { branches }
        }
        OpKind::ReLU
        | OpKind::GlobalAvgPool
        | OpKind::Flatten
        | OpKind::Identity
        | OpKind::Add
        | OpKind::Output => Params::None,
    })
}

fn params_to_json(p: &Params) -> Option<Value> {
    use serde_json::json;
    Some(match p {
        Params::None => return None,
        Params::Input { shape } => json!({ "shape": shape }),
        Params::Conv(c) => json!({
            "in_channels": c.in_channels,
            "out_channels": c.out_channels,
            "kernel": [c.kernel.0, c.kernel.1],
            "stride": [c.stride.0, c.stride.1],
            "padding": [c.padding.0, c.padding.1],
            "groups": c.groups,
            "bias": c.bias,
        }),
        Params::DwConv(c) => json!({
            "channels": c.channels,
            "kernel": [c.kernel.0, c.kernel.1],
            "stride": [c.stride.0, c.stride.1],
            "padding": [c.padding.0, c.padding.1],
            "bias": c.bias,
        }),
        Params::Linear(l) => json!({
            "in_features": l.in_features,
            "out_features": l.out_features,
            "bias": l.bias,
        }),
        Params::BatchNorm(b) => json!({
            "num_features": b.num_features,
            "eps": b.eps,
            "momentum": b.momentum,
        }),
        Params::Pool(p) => json!({
            "kernel": [p.kernel.0, p.kernel.1],
            "stride": [p.stride.0, p.stride.1],
        }),
        Params::Concat { axis } => json!({ "axis": axis }),
        Params::Combiner { branches } => json!({ "branches": branches }),
    })
}

/// Serialize a graph back to the JSON schema (expanded form, weights elided).
pub fn graph_to_json<S: Scalar>(g: &Graph<S>) -> Result<String> {
    let raw = RawGraph {
        inputs: g.inputs.clone(),
        nodes: g
            .nodes()
            .iter()
            .map(|n| RawNode {
                id: n.id.clone(),
                kind: n.kind.name().to_string(),
                params: params_to_json(&n.params),
                supernet_branches: None,
                quant: n.ann.quant.clone(),
            })
            .collect(),
        edges: g.edges.iter().map(|e| (e.src.clone(), e.dst.clone(), e.slot)).collect(),
        outputs: g.outputs.clone(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// Write `graph.json` and `weights.dnft` into a directory.
pub fn save_graph_dir<S: Scalar>(g: &Graph<S>, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("graph.json"), graph_to_json(g)?)?;
    crate::checkpoint::save_file(&dir.join("weights.dnft"), &g.named_weights())?;
    Ok(())
}

/// Load a graph saved by [`save_graph_dir`]. Missing weight file is fine
/// (weights can be initialized afterwards).
pub fn load_graph_dir<S: Scalar>(dir: &std::path::Path) -> Result<Graph<S>> {
    let text = std::fs::read_to_string(dir.join("graph.json"))?;
    let mut g = parse_graph(&text)?;
    let wpath = dir.join("weights.dnft");
    if wpath.exists() {
        let arrays = crate::checkpoint::load_file(&wpath)?;
        let rest = super::load_named_weights(&mut g, arrays)?;
        if let Some((name, _)) = rest.first() {
            return Err(ForgeError::config(format!(
                "weight '{}' does not match any node in the graph",
                name
            )));
        }
    }
    Ok(g)
}
