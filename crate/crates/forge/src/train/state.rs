//! Saving and loading search state (graph + attached method) as a directory:
//! `graph.json`, `state.dnft` (weights and architecture parameters under
//! their canonical names), and `meta.json` describing the method so the
//! preparation passes can be replayed on load.

use crate::checkpoint;
use crate::error::{ForgeError, Result};
use crate::graph::exec::{MethodState, Searchable};
use crate::graph::{schema, OpKind};
use crate::passes;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    method: String,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    bitwidths: Option<Vec<u32>>,
    #[serde(default)]
    exclude: Vec<super::ExcludeSpec>,
}

/// All named arrays of a search state: node weights (combiner logits under
/// their `supernet.` names) plus method parameters.
pub fn state_arrays(sg: &Searchable<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut arrays = Vec::new();
    for node in sg.graph.nodes() {
        for (wname, w) in &node.weights {
            if node.kind == OpKind::SuperNetCombiner && wname == "theta" {
                arrays.push((format!("supernet.{}.theta", node.id), w.clone()));
            } else {
                arrays.push((format!("{}.{}", node.id, wname), w.clone()));
            }
        }
    }
    match &sg.method {
        MethodState::Pit(p) => {
            for (gid, mask) in &p.masks {
                arrays.push((format!("pit.{}.theta", gid), mask.theta.clone()));
            }
        }
        MethodState::Mps(m) => {
            for (owner, choice) in m.choices() {
                arrays.push((format!("mps.{}.theta", owner), choice.theta.clone()));
                if let Some(a) = &choice.alpha {
                    arrays.push((format!("mps.{}.alpha", owner), a.clone()));
                }
            }
        }
        _ => {}
    }
    arrays
}

pub fn save_search_state(
    sg: &Searchable<f32>,
    exclude: &[super::ExcludeSpec],
    bitwidths: &[u32],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("graph.json"), schema::graph_to_json(&sg.graph)?)?;
    checkpoint::save_file(&dir.join("state.dnft"), &state_arrays(sg))?;
    let meta = Meta {
        method: sg.method.name().to_string(),
        tau: match &sg.method {
            MethodState::Supernet(s) => Some(s.tau),
            _ => None,
        },
        bitwidths: match &sg.method {
            MethodState::Mps(_) => Some(bitwidths.to_vec()),
            _ => None,
        },
        exclude: exclude.to_vec(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a search state: parse the graph, replay the preparation passes named
/// in the metadata (group ids and choice owners are deterministic), then
/// overwrite weights and architecture parameters from the checkpoint.
pub fn load_search_state(dir: &Path) -> Result<Searchable<f32>> {
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let text = std::fs::read_to_string(dir.join("graph.json"))?;
    let graph = schema::parse_graph::<f32>(&text)?;
    let rules: Vec<passes::ExcludeRule> =
        meta.exclude.iter().map(|s| s.to_rule()).collect::<Result<_>>()?;

    let mut sg = match meta.method.as_str() {
        "plain" => Searchable::plain(graph),
        "supernet" => {
            let state = crate::supernet::attach(&graph, meta.tau.unwrap_or(1.0))?;
            Searchable { graph, method: MethodState::Supernet(state) }
        }
        "pit" => {
            let mut graph = graph;
            // The saved graph already has BN folded; replay grouping.
            graph.bn_folded = true;
            let (targets, _) = passes::identify_targets(&graph, &rules)?;
            let groups = passes::share_masks(&graph, &targets)?;
            passes::attach_calculators(&mut graph, &groups)?;
            let state = crate::pit::attach(&graph, &groups)?;
            Searchable { graph, method: MethodState::Pit(state) }
        }
        "mps" => {
            let mut graph = graph;
            graph.bn_folded = true;
            let bits = meta
                .bitwidths
                .ok_or_else(|| ForgeError::config("mps state without bitwidths".to_string()))?;
            let (state, _) = crate::mps::attach(&graph, &rules, &bits)?;
            Searchable { graph, method: MethodState::Mps(state) }
        }
        other => return Err(ForgeError::config(format!("unknown method '{}' in meta.json", other))),
    };

    let arrays = checkpoint::load_file::<f32>(&dir.join("state.dnft"))?;
    for (name, t) in arrays {
        if let Some(rest) = name.strip_prefix("supernet.") {
            if let Some(id) = rest.strip_suffix(".theta") {
                sg.graph.node_mut(id)?.weights.insert("theta".into(), t);
                continue;
            }
        }
        match sg.param_mut(&name) {
            Some(master) => *master = t,
            None => {
                // Running stats and other non-trainable buffers.
                let rest = crate::graph::load_named_weights(&mut sg.graph, vec![(name.clone(), t)])?;
                if !rest.is_empty() {
                    return Err(ForgeError::config(format!(
                        "checkpoint array '{}' does not match the loaded search state",
                        name
                    )));
                }
            }
        }
    }
    Ok(sg)
}
