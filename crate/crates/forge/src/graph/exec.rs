//! Forward execution of a (possibly search-attached) graph on a tape.
//!
//! Execution walks the DAG in topological order, registering node weights and
//! architecture parameters as tape leaves, and applying the attached method's
//! transformations in place:
//!
//! - **pit**: target weights and biases are multiplied by the binarized shared
//!   channel mask of their group;
//! - **mps**: target weights become softmax-blended fake-quantized variants,
//!   and quant-point activations are blended PACT variants;
//! - **supernet**: combiner nodes blend branches with Gumbel-Softmax weights
//!   (sampled in train mode, zero-noise in eval mode).
//!
//! Exported graphs carrying frozen quantization annotations run fake-quantized
//! at their fixed settings under the plain method.

use super::{Graph, OpKind, Params};
use crate::error::{ForgeError, Result};
use crate::mps::MpsState;
use crate::pit::PitState;
use crate::supernet::SupernetState;
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOpts {
    pub mode: Mode,
    /// Record ops for a later backward pass.
    pub record: bool,
}

impl ExecOpts {
    pub fn train() -> Self {
        ExecOpts { mode: Mode::Train, record: true }
    }
    pub fn eval() -> Self {
        ExecOpts { mode: Mode::Eval, record: false }
    }
    /// Eval-mode forward that still builds the tape (used by gradient checks
    /// and by cost evaluation on frozen graphs).
    pub fn eval_recorded() -> Self {
        ExecOpts { mode: Mode::Eval, record: true }
    }
}

/// The optimization method attached to a graph, if any.
pub enum MethodState<S: Scalar> {
    Plain,
    Supernet(SupernetState),
    Pit(PitState<S>),
    Mps(MpsState<S>),
}

impl<S: Scalar> MethodState<S> {
    pub fn name(&self) -> &'static str {
        match self {
            MethodState::Plain => "plain",
            MethodState::Supernet(_) => "supernet",
            MethodState::Pit(_) => "pit",
            MethodState::Mps(_) => "mps",
        }
    }
}

/// A graph plus its attached method state: the unit the training loop runs.
pub struct Searchable<S: Scalar> {
    pub graph: Graph<S>,
    pub method: MethodState<S>,
}

impl<S: Scalar> Searchable<S> {
    pub fn plain(graph: Graph<S>) -> Self {
        Searchable { graph, method: MethodState::Plain }
    }

    /// Look up the master tensor behind an optimizer parameter key.
    pub fn param_mut(&mut self, key: &str) -> Option<&mut Tensor<S>> {
        if let Some(rest) = key.strip_prefix("supernet.") {
            let id = rest.strip_suffix(".theta")?;
            return self.graph.node_mut(id).ok()?.weights.get_mut("theta");
        }
        if let Some(rest) = key.strip_prefix("pit.") {
            let gid = rest.strip_suffix(".theta")?;
            if let MethodState::Pit(p) = &mut self.method {
                return p.masks.get_mut(gid).map(|m| &mut m.theta);
            }
            return None;
        }
        if let Some(rest) = key.strip_prefix("mps.") {
            if let MethodState::Mps(m) = &mut self.method {
                if let Some(owner) = rest.strip_suffix(".theta") {
                    return m.choice_mut(owner).map(|c| &mut c.theta);
                }
                if let Some(owner) = rest.strip_suffix(".alpha") {
                    return m.choice_mut(owner).and_then(|c| c.alpha.as_mut());
                }
            }
            return None;
        }
        // Node weights: ids may contain dots, so match the longest node id.
        for split in (1..key.len()).rev() {
            if !key.is_char_boundary(split) {
                continue;
            }
            let (node_id, w) = key.split_at(split);
            if let Some(wname) = w.strip_prefix('.') {
                if self.graph.has_node(node_id) {
                    return self.graph.node_mut(node_id).ok()?.weights.get_mut(wname);
                }
            }
        }
        None
    }
}

/// Everything produced by one forward pass.
pub struct Execution<S: Scalar> {
    pub tape: Tape<S>,
    /// One var per declared graph output.
    pub outputs: Vec<Var>,
    pub node_out: BTreeMap<String, Var>,
    /// Trainable leaves by optimizer key.
    pub param_vars: BTreeMap<String, Var>,
    /// Batch statistics of train-mode batch norms: (node, mean, var).
    pub bn_stats: Vec<(String, Vec<S>, Vec<S>)>,
}

/// Run a forward pass. `rng` drives Gumbel sampling at combiners in train
/// mode; eval mode never touches it.
pub fn execute<S: Scalar, R: rand::Rng>(
    sg: &Searchable<S>,
    inputs: &[Tensor<S>],
    opts: ExecOpts,
    rng: &mut R,
) -> Result<Execution<S>> {
    let g = &sg.graph;
    if inputs.len() != g.inputs.len() {
        return Err(ForgeError::shape(format!(
            "graph declares {} inputs, got {}",
            g.inputs.len(),
            inputs.len()
        )));
    }
    let mut tape = if opts.record { Tape::new() } else { Tape::no_grad() };
    let mut param_vars: BTreeMap<String, Var> = BTreeMap::new();
    let order = g.topo_order()?;

    // Register trainable node weights.
    for id in &order {
        let node = g.node(id)?;
        for (wname, w) in &node.weights {
            if matches!(wname.as_str(), "running_mean" | "running_var") {
                continue;
            }
            if wname == "theta" && node.kind == OpKind::SuperNetCombiner {
                if matches!(sg.method, MethodState::Supernet(_)) {
                    let v = tape.leaf(w.clone());
                    param_vars.insert(format!("supernet.{}.theta", id), v);
                }
                continue;
            }
            let v = tape.leaf(w.clone());
            param_vars.insert(format!("{}.{}", id, wname), v);
        }
    }
    // Register method parameters.
    match &sg.method {
        MethodState::Pit(p) => {
            for (gid, mask) in &p.masks {
                let v = tape.leaf(mask.theta.clone());
                param_vars.insert(format!("pit.{}.theta", gid), v);
            }
        }
        MethodState::Mps(m) => {
            for (owner, choice) in m.choices() {
                let v = tape.leaf(choice.theta.clone());
                param_vars.insert(format!("mps.{}.theta", owner), v);
                if let Some(a) = &choice.alpha {
                    let av = tape.leaf(a.clone());
                    param_vars.insert(format!("mps.{}.alpha", owner), av);
                }
            }
        }
        _ => {}
    }

    let mut ctx = ExecCtx {
        sg,
        param_vars: &param_vars,
        mask_vars: BTreeMap::new(),
        softmax_vars: BTreeMap::new(),
    };

    let mut node_out: BTreeMap<String, Var> = BTreeMap::new();
    let mut bn_stats = Vec::new();
    let mut outputs = Vec::new();

    for id in &order {
        let node = g.node(id)?;
        let in_vars: Vec<Var> = g
            .producers(id)
            .iter()
            .map(|(src, _)| *node_out.get(src).expect("topological order"))
            .collect();

        let out = match node.kind {
            OpKind::Input => {
                let pos = g
                    .inputs
                    .iter()
                    .position(|i| i == id)
                    .ok_or_else(|| ForgeError::graph(format!("Input node '{}' not declared", id)))?;
                let declared = match &node.params {
                    Params::Input { shape } => shape,
                    _ => unreachable!(),
                };
                let t = &inputs[pos];
                if t.shape().len() != declared.len() + 1 || &t.shape()[1..] != declared.as_slice() {
                    return Err(ForgeError::shape(format!(
                        "input '{}' declared {:?} per sample, got {:?}",
                        id,
                        declared,
                        t.shape()
                    )));
                }
                let v = tape.constant(t.clone());
                ctx.quantize_activation(&mut tape, node, v)?
            }
            OpKind::Output | OpKind::Identity => in_vars[0],
            OpKind::ReLU => ops::relu(&mut tape, in_vars[0]),
            OpKind::Flatten => ops::flatten(&mut tape, in_vars[0])?,
            OpKind::GlobalAvgPool => ops::global_avgpool(&mut tape, in_vars[0])?,
            OpKind::MaxPool | OpKind::AvgPool => {
                let p = match &node.params {
                    Params::Pool(p) => p,
                    _ => unreachable!(),
                };
                if node.kind == OpKind::MaxPool {
                    ops::maxpool2d(&mut tape, in_vars[0], p.kernel, p.stride)?
                } else {
                    ops::avgpool2d(&mut tape, in_vars[0], p.kernel, p.stride)?
                }
            }
            OpKind::Add => {
                let mut acc = in_vars[0];
                for v in &in_vars[1..] {
                    acc = ops::add(&mut tape, acc, *v)?;
                }
                acc
            }
            OpKind::Concat => {
                let axis = match &node.params {
                    Params::Concat { axis } => *axis,
                    _ => unreachable!(),
                };
                ops::concat(&mut tape, &in_vars, axis)?
            }
            OpKind::BatchNorm => {
                let p = match &node.params {
                    Params::BatchNorm(p) => p.clone(),
                    _ => unreachable!(),
                };
                let gamma = ctx.node_weight_var(node, "gamma")?;
                let beta = ctx.node_weight_var(node, "beta")?;
                let rm = node.weight("running_mean")?.data().to_vec();
                let rv = node.weight("running_var")?.data().to_vec();
                let (out, stats) = ops::batchnorm(
                    &mut tape,
                    in_vars[0],
                    gamma,
                    beta,
                    &rm,
                    &rv,
                    p.eps,
                    opts.mode == Mode::Train,
                )?;
                if let Some(st) = stats {
                    bn_stats.push((id.clone(), st.mean, st.var));
                }
                out
            }
            OpKind::Conv2d => {
                let p = match &node.params {
                    Params::Conv(p) => p.clone(),
                    _ => unreachable!(),
                };
                let (w, b) = ctx.effective_weight(&mut tape, node)?;
                let y = ops::conv2d(&mut tape, in_vars[0], w, b, p.stride, p.padding, p.groups)
                    .map_err(|e| annotate(e, id))?;
                ctx.quantize_activation(&mut tape, node, y)?
            }
            OpKind::DepthwiseConv2d => {
                let p = match &node.params {
                    Params::DwConv(p) => p.clone(),
                    _ => unreachable!(),
                };
                let (w, b) = ctx.effective_weight(&mut tape, node)?;
                let y = ops::conv2d(&mut tape, in_vars[0], w, b, p.stride, p.padding, p.channels)
                    .map_err(|e| annotate(e, id))?;
                ctx.quantize_activation(&mut tape, node, y)?
            }
            OpKind::Linear => {
                let (w, b) = ctx.effective_weight(&mut tape, node)?;
                let y = ops::linear(&mut tape, in_vars[0], w, b).map_err(|e| annotate(e, id))?;
                ctx.quantize_activation(&mut tape, node, y)?
            }
            OpKind::SuperNetCombiner => {
                let theta = match &sg.method {
                    MethodState::Supernet(_) => {
                        *param_vars.get(&format!("supernet.{}.theta", id)).expect("registered above")
                    }
                    _ => tape.constant(node.weight("theta")?.clone()),
                };
                let (tau, sample) = match (&sg.method, opts.mode) {
                    (MethodState::Supernet(st), Mode::Train) => (st.tau, true),
                    (MethodState::Supernet(st), Mode::Eval) => (st.tau, false),
                    _ => (1.0, false),
                };
                let noise = if sample {
                    Some(ops::sample_gumbel::<S>(rng, in_vars.len()))
                } else {
                    None
                };
                let weights = ops::gumbel_softmax(&mut tape, theta, tau, noise.as_deref())?;
                let mut acc = None;
                for (i, branch) in in_vars.iter().enumerate() {
                    let wi = ops::index(&mut tape, weights, i)?;
                    let term = ops::scale_by_scalar(&mut tape, *branch, wi)
                        .map_err(|e| annotate(e, id))?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => ops::add(&mut tape, a, term).map_err(|e| annotate(e, id))?,
                    });
                }
                acc.ok_or_else(|| ForgeError::graph(format!("combiner '{}' has no branches", id)))?
            }
        };

        if tape.data(out).iter().any(|v| !v.is_finite()) {
            return Err(ForgeError::runtime(format!("non-finite values at node '{}'", id)));
        }
        if g.outputs.contains(id) {
            outputs.push(out);
        }
        node_out.insert(id.clone(), out);
    }

    Ok(Execution { tape, outputs, node_out, param_vars, bn_stats })
}

fn annotate(e: ForgeError, id: &str) -> ForgeError {
    ForgeError::runtime(format!("at node '{}': {}", id, e))
}

struct ExecCtx<'a, S: Scalar> {
    sg: &'a Searchable<S>,
    param_vars: &'a BTreeMap<String, Var>,
    /// Binarized mask per group, built once per pass.
    mask_vars: BTreeMap<String, Var>,
    /// Softmax of precision logits per owner, built once per pass.
    softmax_vars: BTreeMap<String, Var>,
}

impl<'a, S: Scalar> ExecCtx<'a, S> {
    fn node_weight_var(&self, node: &super::Node<S>, name: &str) -> Result<Var> {
        self.param_vars
            .get(&format!("{}.{}", node.id, name))
            .copied()
            .ok_or_else(|| ForgeError::runtime(format!("node '{}' is missing weight '{}'", node.id, name)))
    }

    /// Group mask H(theta), shared across group members within one pass.
    fn group_mask(&mut self, tape: &mut Tape<S>, pit: &PitState<S>, gid: &str) -> Result<Var> {
        if let Some(v) = self.mask_vars.get(gid) {
            return Ok(*v);
        }
        let theta = self
            .param_vars
            .get(&format!("pit.{}.theta", gid))
            .copied()
            .ok_or_else(|| ForgeError::runtime(format!("mask group '{}' has no registered theta", gid)))?;
        let h = ops::heaviside_ste(tape, theta, pit.threshold);
        self.mask_vars.insert(gid.to_string(), h);
        Ok(h)
    }

    fn choice_softmax(&mut self, tape: &mut Tape<S>, owner: &str) -> Result<Var> {
        if let Some(v) = self.softmax_vars.get(owner) {
            return Ok(*v);
        }
        let theta = self
            .param_vars
            .get(&format!("mps.{}.theta", owner))
            .copied()
            .ok_or_else(|| ForgeError::runtime(format!("precision choice '{}' not registered", owner)))?;
        let sm = ops::softmax(tape, theta)?;
        self.softmax_vars.insert(owner.to_string(), sm);
        Ok(sm)
    }

    /// Weight and bias vars for a target node after the attached method's
    /// transformation (and any frozen export-time quantization).
    fn effective_weight(
        &mut self,
        tape: &mut Tape<S>,
        node: &super::Node<S>,
    ) -> Result<(Var, Option<Var>)> {
        let mut w = self.node_weight_var(node, "weight")?;
        let mut b = if node.weights.contains_key("bias") {
            Some(self.node_weight_var(node, "bias")?)
        } else {
            None
        };

        if let Some(q) = &node.ann.quant {
            if let Some(bits) = q.weight_bits {
                w = ops::fake_quant_weight_minmax(tape, w, bits)?;
            }
        }

        match &self.sg.method {
            MethodState::Pit(pit) => {
                if let Some(gid) = &node.ann.mask_group {
                    if pit.masks.contains_key(gid) {
                        let h = self.group_mask(tape, pit, gid)?;
                        w = ops::scale_channels(tape, w, h)?;
                        if let Some(bv) = b {
                            b = Some(ops::mul(tape, bv, h)?);
                        }
                    }
                }
            }
            MethodState::Mps(mps) => {
                let owner = MpsState::<S>::weight_owner(&node.id);
                if mps.has_choice(&owner) {
                    let sm = self.choice_softmax(tape, &owner)?;
                    let mut acc = None;
                    for (i, &bits) in mps.bitwidths.iter().enumerate() {
                        let q = ops::fake_quant_weight_minmax(tape, w, bits)?;
                        let wi = ops::index(tape, sm, i)?;
                        let term = ops::scale_by_scalar(tape, q, wi)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => ops::add(tape, a, term)?,
                        });
                    }
                    w = acc.expect("at least one bitwidth");
                }
            }
            _ => {}
        }
        Ok((w, b))
    }

    /// Apply the activation quantizer owned by this node's output, if any.
    fn quantize_activation(
        &mut self,
        tape: &mut Tape<S>,
        node: &super::Node<S>,
        out: Var,
    ) -> Result<Var> {
        if let Some(q) = &node.ann.quant {
            if let (Some(bits), Some(alpha)) = (q.act_bits, q.act_alpha) {
                let av = tape.constant(Tensor::scalar(S::from_f64(alpha)));
                return ops::fake_quant_act_pact(tape, out, av, bits);
            }
        }
        if let MethodState::Mps(mps) = &self.sg.method {
            if let Some(gid) = mps.act_owner.get(&node.id) {
                let owner = MpsState::<S>::act_owner_key(gid);
                let alpha = self
                    .param_vars
                    .get(&format!("mps.{}.alpha", owner))
                    .copied()
                    .ok_or_else(|| {
                        ForgeError::runtime(format!("activation choice '{}' has no alpha", owner))
                    })?;
                let sm = self.choice_softmax(tape, &owner)?;
                let mut acc = None;
                for (i, &bits) in mps.bitwidths.iter().enumerate() {
                    let q = ops::fake_quant_act_pact(tape, out, alpha, bits)?;
                    let wi = ops::index(tape, sm, i)?;
                    let term = ops::scale_by_scalar(tape, q, wi)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => ops::add(tape, a, term)?,
                    });
                }
                return Ok(acc.expect("at least one bitwidth"));
            }
        }
        Ok(out)
    }
}

/// Fold train-mode batch statistics into the graph's running buffers.
pub fn apply_bn_updates<S: Scalar>(
    g: &mut Graph<S>,
    stats: &[(String, Vec<S>, Vec<S>)],
) -> Result<()> {
    for (id, mean, var) in stats {
        let momentum = match &g.node(id)?.params {
            Params::BatchNorm(p) => S::from_f64(p.momentum),
            _ => return Err(ForgeError::graph(format!("bn stats for non-BN node '{}'", id))),
        };
        let node = g.node_mut(id)?;
        let one_m = S::ONE - momentum;
        if let Some(rm) = node.weights.get_mut("running_mean") {
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = one_m * *r + momentum * *m;
            }
        }
        if let Some(rv) = node.weights.get_mut("running_var") {
            for (r, v) in rv.data_mut().iter_mut().zip(var) {
                *r = one_m * *r + momentum * *v;
            }
        }
    }
    Ok(())
}
