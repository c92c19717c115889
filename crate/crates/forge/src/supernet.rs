//! Path-based architecture search over supernet graphs.
//!
//! Every supernet module holds parallel candidate branches whose outputs are
//! blended by Gumbel-Softmax weights over trainable logits theta (one vector
//! per combiner node, stored in the combiner's weights). Training samples
//! Gumbel noise; evaluation and export use the zero-noise tempered softmax.
//! At the end of a search [`select`] picks the branch with the largest logit.

use crate::error::{ForgeError, Result};
use crate::graph::{Graph, OpKind};
use crate::tensor::{ops, Scalar, Tape, Var};

/// Search state for an attached supernet: the combiner logits live in the
/// combiner nodes themselves, so the state carries only the sampling
/// temperature and the combiner list.
#[derive(Debug, Clone)]
pub struct SupernetState {
    /// Combiner node ids, topological order.
    pub combiners: Vec<String>,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
}

/// Attach path-based search to a graph containing supernet modules.
pub fn attach<S: Scalar>(g: &Graph<S>, tau: f64) -> Result<SupernetState> {
    if !(tau > 0.0) {
        return Err(ForgeError::config(format!("supernet: tau must be positive, got {}", tau)));
    }
    if g.nodes().iter().any(|n| n.ann.quant.is_some()) {
        return Err(ForgeError::config(
            "supernet: graph carries frozen quantizers; methods compose by export, not stacking"
                .to_string(),
        ));
    }
    let mut combiners = Vec::new();
    for id in g.topo_order()? {
        let node = g.node(&id)?;
        if node.kind == OpKind::SuperNetCombiner {
            let m = g.producers(&id).len();
            let theta = node.weight("theta")?;
            if theta.numel() != m {
                return Err(ForgeError::graph(format!(
                    "combiner '{}': theta has {} entries for {} branches",
                    id,
                    theta.numel(),
                    m
                )));
            }
            combiners.push(id);
        }
    }
    if combiners.is_empty() {
        return Err(ForgeError::config(
            "supernet: graph contains no supernet modules".to_string(),
        ));
    }
    Ok(SupernetState { combiners, tau })
}

/// Blend branch outputs with Gumbel-Softmax weights over the logits:
/// `sum_i GS(theta_i) * branch_i`. Pass `noise` (one standard-Gumbel sample
/// per branch) in training; `None` gives the deterministic eval behaviour.
pub fn combine<S: Scalar>(
    tape: &mut Tape<S>,
    branch_outputs: &[Var],
    theta: Var,
    tau: f64,
    noise: Option<&[S]>,
) -> Result<Var> {
    if branch_outputs.is_empty() {
        return Err(ForgeError::shape("combine: no branches".to_string()));
    }
    let first = tape.shape(branch_outputs[0]).to_vec();
    for (i, b) in branch_outputs.iter().enumerate().skip(1) {
        if tape.shape(*b) != first {
            return Err(ForgeError::shape(format!(
                "combine: branch {} shape {:?} differs from branch 0 shape {:?}",
                i,
                tape.shape(*b),
                first
            )));
        }
    }
    let weights = ops::gumbel_softmax(tape, theta, tau, noise)?;
    let mut acc = None;
    for (i, branch) in branch_outputs.iter().enumerate() {
        let wi = ops::index(tape, weights, i)?;
        let term = ops::scale_by_scalar(tape, *branch, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => ops::add(tape, a, term)?,
        });
    }
    Ok(acc.expect("non-empty branches"))
}

/// Expected branch cost under the zero-noise softmax weights:
/// `sum_i SM(theta/tau)_i * cost_i`. Deterministic by construction, which
/// keeps the cost term's gradients low-variance.
pub fn expected_branch_cost<S: Scalar>(
    tape: &mut Tape<S>,
    theta: Var,
    tau: f64,
    branch_costs: &[Var],
) -> Result<Var> {
    if branch_costs.len() != tape.numel(theta) {
        return Err(ForgeError::shape(format!(
            "expected_branch_cost: {} costs for {} logits",
            branch_costs.len(),
            tape.numel(theta)
        )));
    }
    let weights = ops::gumbel_softmax(tape, theta, tau, None)?;
    let mut acc = None;
    for (i, cost) in branch_costs.iter().enumerate() {
        let wi = ops::index(tape, weights, i)?;
        let term = ops::mul(tape, wi, *cost)?;
        acc = Some(match acc {
            None => term,
            Some(a) => ops::add(tape, a, term)?,
        });
    }
    Ok(acc.expect("non-empty costs"))
}

/// Index of the largest logit; exact ties break toward the lowest index.
pub fn select<S: Scalar>(theta: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in theta.iter().enumerate().skip(1) {
        if *v > theta[best] {
            best = i;
        }
    }
    best
}
