//! Differentiable mixed-precision search.
//!
//! Each target weight tensor and each activation edge feeding a target gets a
//! precision choice: trainable logits theta over a bitwidth menu P. The
//! forward pass blends fake-quantized variants of the single master float
//! tensor with softmax(theta) weights; weights use symmetric min-max
//! quantization, activations use PACT with a learned clip. Activation choices
//! are shared across junction operands (the inputs of an Add must end up at
//! one precision), and [`finalize`] freezes each choice at its argmax
//! bitwidth.

use crate::error::{ForgeError, Result};
use crate::graph::exec::MethodState;
use crate::graph::{Graph, OpKind};
use crate::passes::{identify_targets, ExcludeRule};
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_BITWIDTHS: [u32; 3] = [2, 4, 8];
pub const PACT_ALPHA_INIT: f64 = 8.0;

/// Logits over the bitwidth menu for one tensor, plus the PACT clip for
/// activation choices.
#[derive(Debug, Clone)]
pub struct PrecisionChoice<S: Scalar> {
    pub theta: Tensor<S>,
    pub alpha: Option<Tensor<S>>,
}

/// Search state for an attached mixed-precision search.
#[derive(Debug, Clone)]
pub struct MpsState<S: Scalar> {
    /// Ordered bitwidth menu P.
    pub bitwidths: Vec<u32>,
    /// Weight choices by target node id.
    pub weight_choices: BTreeMap<String, PrecisionChoice<S>>,
    /// Activation choices by shared-group id (the group's first source node).
    pub act_choices: BTreeMap<String, PrecisionChoice<S>>,
    /// Which nodes apply an activation quantizer to their output, and the
    /// group whose choice they use.
    pub act_owner: BTreeMap<String, String>,
    /// For each converted target, the activation group determining its input
    /// bitwidth (used by the cost models).
    pub input_bits_src: BTreeMap<String, String>,
}

impl<S: Scalar> MpsState<S> {
    pub fn weight_owner(node_id: &str) -> String {
        format!("{}:w", node_id)
    }

    pub fn act_owner_key(gid: &str) -> String {
        format!("{}:act", gid)
    }

    pub fn has_choice(&self, owner: &str) -> bool {
        self.lookup(owner).is_some()
    }

    fn lookup(&self, owner: &str) -> Option<&PrecisionChoice<S>> {
        if let Some(node) = owner.strip_suffix(":w") {
            return self.weight_choices.get(node);
        }
        if let Some(gid) = owner.strip_suffix(":act") {
            return self.act_choices.get(gid);
        }
        None
    }

    pub fn choice_mut(&mut self, owner: &str) -> Option<&mut PrecisionChoice<S>> {
        if let Some(node) = owner.strip_suffix(":w") {
            return self.weight_choices.get_mut(node);
        }
        if let Some(gid) = owner.strip_suffix(":act") {
            return self.act_choices.get_mut(gid);
        }
        None
    }

    /// All choices with their owner keys, weights first, deterministic order.
    pub fn choices(&self) -> Vec<(String, &PrecisionChoice<S>)> {
        let mut out = Vec::new();
        for (node, c) in &self.weight_choices {
            out.push((Self::weight_owner(node), c));
        }
        for (gid, c) in &self.act_choices {
            out.push((Self::act_owner_key(gid), c));
        }
        out
    }

    pub fn into_method(self) -> MethodState<S> {
        MethodState::Mps(self)
    }
}

/// Nodes whose outputs are activation quantization points: graph inputs and
/// target layers. Everything else propagates quantized values unchanged.
fn collect_sources<S: Scalar>(g: &Graph<S>, id: &str, out: &mut BTreeSet<String>) -> Result<()> {
    let node = g.node(id)?;
    if node.kind == OpKind::Input || node.kind.is_target() {
        out.insert(id.to_string());
        return Ok(());
    }
    for (src, _) in g.producers(id) {
        collect_sources(g, &src, out)?;
    }
    Ok(())
}

/// Attach mixed-precision search to a prepared graph. Requires batch norm to
/// have been folded first (leftover unfoldable BatchNorm nodes are tolerated
/// and simply not quantized). Excluded targets keep full-precision weights
/// and do not have their inputs quantized.
pub fn attach<S: Scalar>(
    g: &Graph<S>,
    exclude: &[ExcludeRule],
    bitwidths: &[u32],
) -> Result<(MpsState<S>, Vec<String>)> {
    if bitwidths.is_empty() {
        return Err(ForgeError::config("mps: empty bitwidth menu".to_string()));
    }
    if let Some(&bad) = bitwidths.iter().find(|&&b| b < 2) {
        return Err(ForgeError::config(format!("mps: bitwidth {} < 2", bad)));
    }
    if g.nodes().iter().any(|n| n.ann.quant.is_some()) {
        return Err(ForgeError::config(
            "mps: graph carries frozen quantizers; methods compose by export, not stacking"
                .to_string(),
        ));
    }
    if g.nodes().iter().any(|n| n.kind == OpKind::SuperNetCombiner) {
        return Err(ForgeError::config(
            "mps: graph still contains supernet modules; export the supernet first".to_string(),
        ));
    }
    if !g.bn_folded && g.nodes().iter().any(|n| n.kind == OpKind::BatchNorm) {
        return Err(ForgeError::config(
            "mps: fold batch norm before attaching (fold_bn pass)".to_string(),
        ));
    }

    let (targets, warnings) = identify_targets(g, exclude)?;
    if targets.is_empty() {
        return Err(ForgeError::config("mps: no target layers to quantize".to_string()));
    }
    let m = bitwidths.len();
    let mut state = MpsState {
        bitwidths: bitwidths.to_vec(),
        weight_choices: BTreeMap::new(),
        act_choices: BTreeMap::new(),
        act_owner: BTreeMap::new(),
        input_bits_src: BTreeMap::new(),
    };
    for t in &targets {
        state
            .weight_choices
            .insert(t.clone(), PrecisionChoice { theta: Tensor::zeros(&[m]), alpha: None });
    }

    // Activation sharing: sources feeding one junction (or one target input)
    // must agree on precision and quantizer parameters.
    let order = g.topo_order()?;
    let pos: BTreeMap<&str, usize> =
        order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut parent: BTreeMap<String, String> = BTreeMap::new();
    fn find(parent: &mut BTreeMap<String, String>, x: &str) -> String {
        let p = parent.get(x).cloned().unwrap_or_else(|| x.to_string());
        if p == x {
            return p;
        }
        let r = find(parent, &p);
        parent.insert(x.to_string(), r.clone());
        r
    }
    let union =
        |parent: &mut BTreeMap<String, String>, a: &str, b: &str, pos: &BTreeMap<&str, usize>| {
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                // Deterministic representative: earliest in topological order.
                if pos[ra.as_str()] <= pos[rb.as_str()] {
                    parent.insert(rb, ra);
                } else {
                    parent.insert(ra, rb);
                }
            }
        };

    let mut needed: BTreeSet<String> = BTreeSet::new();
    for t in &targets {
        let prods = g.producers(t);
        let mut sources = BTreeSet::new();
        collect_sources(g, &prods[0].0, &mut sources)?;
        let srcs: Vec<String> = sources.into_iter().collect();
        for w in srcs.windows(2) {
            union(&mut parent, &w[0], &w[1], &pos);
        }
        needed.extend(srcs.iter().cloned());
        if let Some(first) = srcs.first() {
            state.input_bits_src.insert(t.clone(), first.clone());
        }
    }

    // Resolve groups among needed sources.
    let mut needed_sorted: Vec<String> = needed.into_iter().collect();
    needed_sorted.sort_by_key(|id| pos[id.as_str()]);
    for src in &needed_sorted {
        let root = find(&mut parent, src);
        state.act_owner.insert(src.clone(), root.clone());
        state.act_choices.entry(root).or_insert_with(|| PrecisionChoice {
            theta: Tensor::zeros(&[m]),
            alpha: Some(Tensor::scalar(S::from_f64(PACT_ALPHA_INIT))),
        });
    }
    // Rewrite input-bits links to group representatives.
    let links: Vec<(String, String)> =
        state.input_bits_src.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for (t, src) in links {
        let root = find(&mut parent, &src);
        state.input_bits_src.insert(t, root);
    }
    Ok((state, warnings))
}

/// Blend fake-quantized variants of one master tensor with softmax(theta)
/// weights: `sum_p SM(theta)_p * Q_p(t)`. `alpha` selects the PACT activation
/// quantizer; `None` uses symmetric min-max (weights).
pub fn effective_tensor<S: Scalar>(
    tape: &mut Tape<S>,
    t: Var,
    theta: Var,
    bitwidths: &[u32],
    alpha: Option<Var>,
) -> Result<Var> {
    if bitwidths.is_empty() {
        return Err(ForgeError::config("effective_tensor: empty bitwidth menu".to_string()));
    }
    if tape.numel(theta) != bitwidths.len() {
        return Err(ForgeError::shape(format!(
            "effective_tensor: {} logits for {} bitwidths",
            tape.numel(theta),
            bitwidths.len()
        )));
    }
    let sm = ops::softmax(tape, theta)?;
    let mut acc = None;
    for (i, &bits) in bitwidths.iter().enumerate() {
        let q = match alpha {
            Some(a) => ops::fake_quant_act_pact(tape, t, a, bits)?,
            None => ops::fake_quant_weight_minmax(tape, t, bits)?,
        };
        let wi = ops::index(tape, sm, i)?;
        let term = ops::scale_by_scalar(tape, q, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => ops::add(tape, a, term)?,
        });
    }
    Ok(acc.expect("non-empty menu"))
}

/// Softmax-expected bitwidth: `sum_p SM(theta)_p * p`.
pub fn effective_bitwidth<S: Scalar>(
    tape: &mut Tape<S>,
    theta: Var,
    bitwidths: &[u32],
) -> Result<Var> {
    if tape.numel(theta) != bitwidths.len() {
        return Err(ForgeError::shape(format!(
            "effective_bitwidth: {} logits for {} bitwidths",
            tape.numel(theta),
            bitwidths.len()
        )));
    }
    let sm = ops::softmax(tape, theta)?;
    let pv = tape.constant(Tensor::from_vec(
        vec![bitwidths.len()],
        bitwidths.iter().map(|&b| S::from_f64(b as f64)).collect(),
    )?);
    let prod = ops::mul(tape, sm, pv)?;
    Ok(ops::sum(tape, prod))
}

/// Argmax bitwidth for a finished choice; exact ties prefer the larger
/// bitwidth. Returns (bits, index into the menu).
pub fn finalize<S: Scalar>(theta: &[S], bitwidths: &[u32]) -> (u32, usize) {
    let mut best = 0;
    for i in 1..theta.len() {
        if theta[i] > theta[best]
            || (theta[i] == theta[best] && bitwidths[i] > bitwidths[best])
        {
            best = i;
        }
    }
    (bitwidths[best], best)
}
