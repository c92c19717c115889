//! Conversion passes over the graph IR.
//!
//! The pass suite prepares a plain graph for an optimization method and
//! converts it back afterwards:
//!
//! 1. [`identify_targets`] — pick the Conv/Linear layers to optimize, minus
//!    user exclusions;
//! 2. [`share_masks`] — group targets whose output-channel masks must
//!    coincide (depthwise followers, Add operands);
//! 3. [`fold_bn`] / [`unfold_bn`] — absorb batch norm into the preceding
//!    layer, reversibly;
//! 4. [`attach_calculators`] — link every node to its channel-defining
//!    predecessor and record how effective shapes derive from it;
//! 5. [`export`] — strip the search structures from a finished search and
//!    emit a plain graph (selected branches, physically pruned channels,
//!    frozen quantizers).
//!
//! Passes are pure `graph -> graph` transformations; nothing here touches
//! global state.

use crate::error::{ForgeError, Result};
use crate::graph::exec::{MethodState, Searchable};
use crate::graph::{
    shapes, BatchNormParams, ChanSrc, FixedQuant, FoldedBn, Graph, Node, OpKind, Params,
};
use crate::tensor::{Scalar, Tensor};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Rule excluding nodes from optimization, by exact id or by kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ExcludeRule {
    Id(String),
    Kind(OpKind),
}

impl ExcludeRule {
    pub fn matches<S: Scalar>(&self, node: &Node<S>) -> bool {
        match self {
            ExcludeRule::Id(id) => &node.id == id,
            ExcludeRule::Kind(k) => &node.kind == k,
        }
    }
}

/// Set of layers sharing one output-channel mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskGroup {
    pub id: String,
    /// Member target node ids, topological order.
    pub members: Vec<String>,
    /// Channels masked together.
    pub channels: usize,
    /// Frozen groups keep every channel (classifier outputs, channels tied to
    /// graph inputs or shape-rigid junctions).
    pub frozen: bool,
}

/// Warnings and bookkeeping emitted by the preparation passes.
#[derive(Debug, Default, Clone, Serialize)]
pub struct PassReport {
    pub targets: Vec<String>,
    pub warnings: Vec<String>,
    pub groups: Vec<MaskGroup>,
    pub folded_bn: Vec<String>,
}

/// Conv/Linear layers to optimize: every target-kind node not matched by an
/// exclusion rule, in deterministic topological order. Exclusion rules that
/// match nothing produce warnings, not errors. Grouped convolutions other
/// than depthwise are auto-excluded with a warning (their channel masks are
/// not well defined).
pub fn identify_targets<S: Scalar>(
    g: &Graph<S>,
    exclude: &[ExcludeRule],
) -> Result<(Vec<String>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut used = vec![false; exclude.len()];
    let mut targets = Vec::new();
    for id in g.topo_order()? {
        let node = g.node(&id)?;
        if !node.kind.is_target() {
            continue;
        }
        if let Params::Conv(p) = &node.params {
            if p.groups > 1 {
                warnings.push(format!(
                    "node '{}': grouped convolution (groups={}) excluded from optimization",
                    id, p.groups
                ));
                continue;
            }
        }
        let mut excluded = false;
        for (i, rule) in exclude.iter().enumerate() {
            if rule.matches(node) {
                used[i] = true;
                excluded = true;
            }
        }
        if !excluded {
            targets.push(id);
        }
    }
    for (i, rule) in exclude.iter().enumerate() {
        if !used[i] {
            warnings.push(format!("exclusion rule {:?} matched nothing", rule));
        }
    }
    Ok((targets, warnings))
}

/// Nearest non-transparent predecessor that defines the channel count seen on
/// this node's output. `None` for nodes that define their own.
fn channel_definer<S: Scalar>(g: &Graph<S>, id: &str) -> Result<String> {
    let mut cur = id.to_string();
    loop {
        let node = g.node(&cur)?;
        if node.kind.is_channel_transparent() {
            let prods = g.producers(&cur);
            if prods.is_empty() {
                return Err(ForgeError::graph(format!(
                    "node '{}' has no predecessor to define its channels",
                    cur
                )));
            }
            cur = prods[0].0.clone();
        } else {
            return Ok(cur);
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
    frozen: Vec<bool>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), frozen: vec![false; n] }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let r = self.find(self.parent[i]);
            self.parent[i] = r;
        }
        self.parent[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let frozen = self.frozen[ra] || self.frozen[rb];
            self.parent[rb.max(ra)] = ra.min(rb);
            self.frozen[ra.min(rb)] = frozen;
        }
    }
    fn freeze(&mut self, i: usize) {
        let r = self.find(i);
        self.frozen[r] = true;
    }
}

/// Group targets under shared channel masks:
///
/// - a depthwise conv shares the group of its channel-defining predecessor;
/// - all producers feeding one element-wise Add share a group;
/// - concat operands stay distinct (the concat output is composite);
/// - everything else gets its own group.
///
/// Groups whose channels are pinned by the task are frozen: layers feeding a
/// graph output, layers entangled with graph inputs or composite producers
/// through an Add, and layers feeding grouped convolutions.
pub fn share_masks<S: Scalar>(g: &Graph<S>, targets: &[String]) -> Result<Vec<MaskGroup>> {
    let order = g.topo_order()?;
    let pos: BTreeMap<&str, usize> =
        order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let tset: BTreeSet<&str> = targets.iter().map(|s| s.as_str()).collect();
    let tindex: BTreeMap<&str, usize> =
        targets.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut uf = UnionFind::new(targets.len());
    let shape_map = shapes::infer_shapes(g, 1)?;

    // Depthwise rule.
    for (ti, id) in targets.iter().enumerate() {
        if g.node(id)?.kind == OpKind::DepthwiseConv2d {
            let prods = g.producers(id);
            let def = channel_definer(g, &prods[0].0)?;
            match tindex.get(def.as_str()) {
                Some(&di) => uf.union(ti, di),
                // Channels come from something unmaskable; keep them all.
                None => uf.freeze(ti),
            }
        }
    }

    // Add rule: operand producers converge, their channel definers share.
    for node in g.nodes() {
        if node.kind != OpKind::Add {
            continue;
        }
        let mut defs = Vec::new();
        let mut pinned = false;
        for (src, _) in g.producers(&node.id) {
            let def = channel_definer(g, &src)?;
            match tindex.get(def.as_str()) {
                Some(&di) => defs.push(di),
                None => pinned = true,
            }
        }
        for w in defs.windows(2) {
            uf.union(w[0], w[1]);
        }
        if pinned {
            for d in &defs {
                uf.freeze(*d);
            }
        }
    }

    // Freeze groups that would change the task interface or break rigid
    // consumers: reached from a member's output without crossing another
    // channel-redefining node.
    for (ti, id) in targets.iter().enumerate() {
        let mut stack = vec![id.clone()];
        let mut seen = BTreeSet::new();
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            for consumer in g.consumers(&cur) {
                let cn = g.node(&consumer)?;
                match cn.kind {
                    OpKind::Output => uf.freeze(ti),
                    OpKind::SuperNetCombiner => uf.freeze(ti),
                    OpKind::Conv2d => {
                        if let Params::Conv(p) = &cn.params {
                            if p.groups > 1 {
                                uf.freeze(ti);
                            }
                        }
                    }
                    OpKind::Linear | OpKind::Flatten | OpKind::Concat => {}
                    OpKind::DepthwiseConv2d => {
                        if !tset.contains(consumer.as_str()) {
                            // Unmasked depthwise conv has rigid channel count.
                            uf.freeze(ti);
                        } else {
                            stack.push(consumer.clone());
                        }
                    }
                    _ => stack.push(consumer.clone()),
                }
            }
        }
    }

    // Collect groups deterministically by first-member topological position.
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ti in 0..targets.len() {
        let r = uf.find(ti);
        by_root.entry(r).or_default().push(ti);
    }
    let mut roots: Vec<(usize, Vec<usize>)> = by_root.into_iter().collect();
    roots.sort_by_key(|(r, _)| pos[targets[*r].as_str()]);

    let mut groups = Vec::new();
    for (gi, (root, mut members)) in roots.into_iter().enumerate() {
        members.sort_by_key(|&ti| pos[targets[ti].as_str()]);
        let ids: Vec<String> = members.iter().map(|&ti| targets[ti].clone()).collect();
        let channels: Vec<usize> = ids
            .iter()
            .map(|id| Graph::<S>::static_channels(&shape_map[id]))
            .collect();
        if channels.windows(2).any(|w| w[0] != w[1]) {
            return Err(ForgeError::graph(format!(
                "mask group over {:?} has inconsistent channel counts {:?}",
                ids, channels
            )));
        }
        groups.push(MaskGroup {
            id: format!("g{}", gi),
            members: ids,
            channels: channels[0],
            frozen: uf.frozen[root],
        });
    }
    Ok(groups)
}

/// Absorb every foldable BatchNorm into its preceding Conv/FC layer.
///
/// Foldable means: single producer of target kind whose only consumer is the
/// batch norm. Anything else is left in place with a warning. Folding uses
/// the running statistics, so eval-mode behaviour is preserved; the original
/// parameters are saved on the absorbing node for [`unfold_bn`].
pub fn fold_bn<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, Vec<String>, Vec<String>)> {
    let mut out = g.clone();
    let mut warnings = Vec::new();
    let mut folded = Vec::new();
    let bn_ids: Vec<String> = out
        .topo_order()?
        .into_iter()
        .filter(|id| out.node(id).map(|n| n.kind == OpKind::BatchNorm).unwrap_or(false))
        .collect();

    for bn_id in bn_ids {
        let prods = out.producers(&bn_id);
        let pred_id = prods[0].0.clone();
        let pred_kind = out.node(&pred_id)?.kind;
        if !pred_kind.is_target() {
            warnings.push(format!(
                "batch norm '{}' not preceded by a foldable layer; left in place",
                bn_id
            ));
            continue;
        }
        if out.consumers(&pred_id).len() != 1 {
            warnings.push(format!(
                "batch norm '{}': producer '{}' has other consumers; left in place",
                bn_id, pred_id
            ));
            continue;
        }
        let bn = out.node(&bn_id)?;
        let (eps, momentum) = match &bn.params {
            Params::BatchNorm(p) => (p.eps, p.momentum),
            _ => unreachable!(),
        };
        let gamma = bn.weight("gamma")?.clone();
        let beta = bn.weight("beta")?.clone();
        let mean = bn.weight("running_mean")?.clone();
        let var = bn.weight("running_var")?.clone();
        if gamma.data().iter().any(|v| v.abs().to_f64() < 1e-12) {
            warnings.push(format!(
                "batch norm '{}': gamma has zero entries, fold would be irreversible; left in place",
                bn_id
            ));
            continue;
        }

        let factors: Vec<S> = gamma
            .data()
            .iter()
            .zip(var.data())
            .map(|(g, v)| *g / (*v + S::from_f64(eps)).sqrt())
            .collect();

        let pred = out.node_mut(&pred_id)?;
        let had_bias = pred.weights.contains_key("bias");
        {
            let w = pred.weights.get_mut("weight").ok_or_else(|| {
                ForgeError::graph(format!("node '{}' has no weight to fold into", pred_id))
            })?;
            let c = w.shape()[0];
            let per = w.numel() / c;
            for ci in 0..c {
                for j in 0..per {
                    let idx = ci * per + j;
                    let v = w.data()[idx] * factors[ci];
                    w.data_mut()[idx] = v;
                }
            }
        }
        let c = factors.len();
        let old_bias =
            pred.weights.get("bias").cloned().unwrap_or_else(|| Tensor::zeros(&[c]));
        let new_bias: Vec<S> = (0..c)
            .map(|ci| factors[ci] * (old_bias.data()[ci] - mean.data()[ci]) + beta.data()[ci])
            .collect();
        pred.weights.insert("bias".into(), Tensor::from_vec(vec![c], new_bias)?);
        set_bias_flag(&mut pred.params, true);
        pred.ann.folded_bn = Some(FoldedBn {
            bn_id: bn_id.clone(),
            gamma,
            beta,
            mean,
            var,
            eps,
            momentum,
            had_bias,
        });

        // Rewire the batch norm's consumers to the producer and drop it.
        let rewires: Vec<(String, usize)> = out
            .edges
            .iter()
            .filter(|e| e.src == bn_id)
            .map(|e| (e.dst.clone(), e.slot))
            .collect();
        out.remove_node(&bn_id)?;
        for (dst, slot) in rewires {
            out.add_edge(pred_id.clone(), dst, slot);
        }
        folded.push(format!("{}<-{}", pred_id, bn_id));
    }
    out.bn_folded = true;
    Ok((out, folded, warnings))
}

fn set_bias_flag(params: &mut Params, bias: bool) {
    match params {
        Params::Conv(p) => p.bias = bias,
        Params::DwConv(p) => p.bias = bias,
        Params::Linear(p) => p.bias = bias,
        _ => {}
    }
}

/// Undo [`fold_bn`]: restore the original layer weights and re-insert the
/// batch norm nodes (ids `<layer>.bn`) after their layers.
pub fn unfold_bn<S: Scalar>(g: &Graph<S>) -> Result<Graph<S>> {
    let mut out = g.clone();
    let with_fold: Vec<String> = out
        .nodes()
        .iter()
        .filter(|n| n.ann.folded_bn.is_some())
        .map(|n| n.id.clone())
        .collect();
    for id in with_fold {
        let rec = out.node(&id)?.ann.folded_bn.clone().expect("filtered");
        let factors: Vec<S> = rec
            .gamma
            .data()
            .iter()
            .zip(rec.var.data())
            .map(|(g, v)| *g / (*v + S::from_f64(rec.eps)).sqrt())
            .collect();
        let node = out.node_mut(&id)?;
        {
            let w = node.weights.get_mut("weight").expect("folded layer has weight");
            let c = w.shape()[0];
            let per = w.numel() / c;
            for ci in 0..c {
                for j in 0..per {
                    let idx = ci * per + j;
                    let v = w.data()[idx] / factors[ci];
                    w.data_mut()[idx] = v;
                }
            }
        }
        let c = factors.len();
        if rec.had_bias {
            let folded_bias = node.weights.get("bias").expect("folded layer has bias").clone();
            let orig: Vec<S> = (0..c)
                .map(|ci| {
                    (folded_bias.data()[ci] - rec.beta.data()[ci]) / factors[ci]
                        + rec.mean.data()[ci]
                })
                .collect();
            node.weights.insert("bias".into(), Tensor::from_vec(vec![c], orig)?);
        } else {
            node.weights.remove("bias");
            set_bias_flag(&mut node.params, false);
        }
        node.ann.folded_bn = None;

        let bn_id = rec.bn_id.clone();
        let mut bn = Node::new(
            bn_id.clone(),
            OpKind::BatchNorm,
            Params::BatchNorm(BatchNormParams {
                num_features: c,
                eps: rec.eps,
                momentum: rec.momentum,
            }),
        );
        bn.weights.insert("gamma".into(), rec.gamma);
        bn.weights.insert("beta".into(), rec.beta);
        bn.weights.insert("running_mean".into(), rec.mean);
        bn.weights.insert("running_var".into(), rec.var);

        let rewires: Vec<usize> = (0..out.edges.len()).filter(|&i| out.edges[i].src == id).collect();
        for &i in &rewires {
            out.edges[i].src = bn_id.clone();
        }
        out.add_node(bn)?;
        out.add_edge(id.clone(), bn_id, 0);
    }
    out.bn_folded = false;
    Ok(out)
}

/// Annotate every node with its mask group and its effective-shape source:
/// the channel-defining predecessor link plus the transform deriving this
/// node's effective channel count from it.
pub fn attach_calculators<S: Scalar>(g: &mut Graph<S>, groups: &[MaskGroup]) -> Result<()> {
    let shape_map = shapes::infer_shapes(g, 1)?;
    for group in groups {
        for m in &group.members {
            g.node_mut(m)?.ann.mask_group = Some(group.id.clone());
        }
    }
    let order = g.topo_order()?;
    for id in &order {
        let kind = g.node(id)?.kind;
        let src = match kind {
            OpKind::Conv2d | OpKind::Linear => ChanSrc::Own,
            OpKind::Input | OpKind::SuperNetCombiner => {
                ChanSrc::Fixed(Graph::<S>::static_channels(&shape_map[id]))
            }
            OpKind::Flatten => {
                let prods = g.producers(id);
                let in_shape = &shape_map[&prods[0].0];
                let k: usize = if in_shape.len() > 2 { in_shape[2..].iter().product() } else { 1 };
                ChanSrc::FlattenOf { src: channel_definer(g, &prods[0].0)?, k }
            }
            OpKind::Concat => {
                let mut srcs = Vec::new();
                for (p, _) in g.producers(id) {
                    srcs.push(channel_definer(g, &p)?);
                }
                ChanSrc::ConcatOf(srcs)
            }
            _ => {
                // Channel-transparent: depthwise conv, relu, pools, bn, add...
                let prods = g.producers(id);
                if prods.is_empty() {
                    return Err(ForgeError::graph(format!(
                        "node '{}' has no predecessor for shape propagation",
                        id
                    )));
                }
                ChanSrc::Follow(channel_definer(g, &prods[0].0)?)
            }
        };
        g.node_mut(id)?.ann.chan_src = Some(src);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ExportOpts {
    /// Re-materialize folded batch norms in the exported graph.
    pub unfold_bn: bool,
}

impl Default for ExportOpts {
    fn default() -> Self {
        ExportOpts { unfold_bn: false }
    }
}

/// Per-layer channel changes recorded by a PIT export.
#[derive(Debug, Clone, Serialize)]
pub struct PrunedLayer {
    pub node: String,
    pub kept: usize,
    pub total: usize,
}

/// Frozen precision assignment recorded by an MPS export.
#[derive(Debug, Clone, Serialize)]
pub struct PrecisionAssignment {
    pub owner: String,
    pub bits: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct ExportReport {
    pub method: String,
    pub selected_branches: BTreeMap<String, usize>,
    pub pruned: Vec<PrunedLayer>,
    pub precisions: Vec<PrecisionAssignment>,
    pub removed_nodes: Vec<String>,
}

/// Convert a finished search back to a plain graph, free of combiners, masks
/// and multi-precision blending. Mask groups binarizing to all-zero keep
/// their single largest-logit channel so the exported graph stays valid.
pub fn export<S: Scalar>(sg: &Searchable<S>, opts: ExportOpts) -> Result<(Graph<S>, ExportReport)> {
    let mut report = ExportReport { method: sg.method.name().to_string(), ..Default::default() };
    let mut g = match &sg.method {
        MethodState::Plain => sg.graph.clone(),
        MethodState::Supernet(state) => export_supernet(&sg.graph, state, &mut report)?,
        MethodState::Pit(state) => export_pit(&sg.graph, state, &mut report)?,
        MethodState::Mps(state) => export_mps(&sg.graph, state, &mut report)?,
    };
    if opts.unfold_bn {
        g = unfold_bn(&g)?;
    }
    strip_identities(&mut g, &mut report)?;
    prune_unreachable(&mut g, &mut report)?;
    for node in g.nodes_mut() {
        node.ann.mask_group = None;
        node.ann.chan_src = None;
        if opts.unfold_bn {
            node.ann.folded_bn = None;
        }
    }
    g.validate()?;
    Ok((g, report))
}

fn export_supernet<S: Scalar>(
    g: &Graph<S>,
    state: &crate::supernet::SupernetState,
    report: &mut ExportReport,
) -> Result<Graph<S>> {
    let mut out = g.clone();
    for comb_id in &state.combiners {
        let node = out.node(comb_id)?;
        let theta = node.weight("theta")?;
        let pick = crate::supernet::select(theta.data());
        let branches = match &node.params {
            Params::Combiner { branches } => branches.clone(),
            _ => return Err(ForgeError::graph(format!("'{}' is not a combiner", comb_id))),
        };
        report.selected_branches.insert(comb_id.clone(), pick);
        let tail = branches[pick]
            .last()
            .cloned()
            .ok_or_else(|| ForgeError::graph(format!("combiner '{}' branch {} empty", comb_id, pick)))?;
        let rewires: Vec<(String, usize)> = out
            .edges
            .iter()
            .filter(|e| e.src == *comb_id)
            .map(|e| (e.dst.clone(), e.slot))
            .collect();
        out.remove_node(comb_id)?;
        for (dst, slot) in rewires {
            out.add_edge(tail.clone(), dst, slot);
        }
    }
    Ok(out)
}

/// Kept channel indices for each trainable group, applying the keep-alive
/// rule when a mask binarizes to all-zero.
pub fn kept_channels<S: Scalar>(state: &crate::pit::PitState<S>) -> BTreeMap<String, Vec<usize>> {
    let mut kept = BTreeMap::new();
    for (gid, mask) in &state.masks {
        let thr = S::from_f64(state.threshold);
        let mut idx: Vec<usize> = mask
            .theta
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v >= thr)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            let mut best = 0;
            for (i, v) in mask.theta.data().iter().enumerate() {
                if *v > mask.theta.data()[best] {
                    best = i;
                }
            }
            idx.push(best);
        }
        kept.insert(gid.clone(), idx);
    }
    kept
}

fn export_pit<S: Scalar>(
    g: &Graph<S>,
    state: &crate::pit::PitState<S>,
    report: &mut ExportReport,
) -> Result<Graph<S>> {
    let kept = kept_channels(state);
    let shape_map = shapes::infer_shapes(g, 1)?;
    let mut out = g.clone();

    // Keep-lists in each node's input channel space, resolved through the
    // calculator links; None means all channels kept.
    let keep_of_def = |def_id: &str| -> Result<Option<Vec<usize>>> {
        resolve_keep(g, def_id, &kept, &shape_map)
    };

    let order = out.topo_order()?;
    for id in &order {
        let node = g.node(id)?;
        // Input-side slicing.
        let input_keep: Option<Vec<usize>> = if matches!(
            node.kind,
            OpKind::Conv2d | OpKind::Linear | OpKind::BatchNorm
        ) {
            let prods = g.producers(id);
            if prods.is_empty() {
                None
            } else {
                let src = &prods[0].0;
                let src_node = g.node(src)?;
                let def = if src_node.kind.is_channel_transparent() {
                    channel_definer(g, src)?
                } else {
                    src.clone()
                };
                keep_of_def(&def)?
            }
        } else {
            None
        };
        if let Some(keep) = &input_keep {
            let node = out.node_mut(id)?;
            match node.kind {
                OpKind::Conv2d => {
                    if let Some(w) = node.weights.get("weight") {
                        let sliced = slice_axis(w, 1, keep)?;
                        node.weights.insert("weight".into(), sliced);
                    }
                    if let Params::Conv(p) = &mut node.params {
                        p.in_channels = keep.len();
                    }
                }
                OpKind::Linear => {
                    if let Some(w) = node.weights.get("weight") {
                        let sliced = slice_axis(w, 1, keep)?;
                        node.weights.insert("weight".into(), sliced);
                    }
                    if let Params::Linear(p) = &mut node.params {
                        p.in_features = keep.len();
                    }
                }
                OpKind::BatchNorm => {
                    for wname in ["gamma", "beta", "running_mean", "running_var"] {
                        if let Some(w) = node.weights.get(wname) {
                            let sliced = slice_axis(w, 0, keep)?;
                            node.weights.insert(wname.into(), sliced);
                        }
                    }
                    if let Params::BatchNorm(p) = &mut node.params {
                        p.num_features = keep.len();
                    }
                }
                _ => {}
            }
        }
        // Output-side slicing for group members.
        if let Some(gid) = &node.ann.mask_group {
            if let Some(keep) = kept.get(gid) {
                let total = match &shape_map.get(id) {
                    Some(s) => Graph::<S>::static_channels(s),
                    None => 0,
                };
                report.pruned.push(PrunedLayer { node: id.clone(), kept: keep.len(), total });
                let node = out.node_mut(id)?;
                if let Some(w) = node.weights.get("weight") {
                    let sliced = slice_axis(w, 0, keep)?;
                    node.weights.insert("weight".into(), sliced);
                }
                if let Some(b) = node.weights.get("bias") {
                    let sliced = slice_axis(b, 0, keep)?;
                    node.weights.insert("bias".into(), sliced);
                }
                match &mut node.params {
                    Params::Conv(p) => p.out_channels = keep.len(),
                    Params::DwConv(p) => p.channels = keep.len(),
                    Params::Linear(p) => p.out_features = keep.len(),
                    _ => {}
                }
                // Folded batch-norm records are per output channel; keep them
                // consistent so a later unfold still lines up.
                if let Some(rec) = &mut node.ann.folded_bn {
                    rec.gamma = slice_axis(&rec.gamma, 0, keep)?;
                    rec.beta = slice_axis(&rec.beta, 0, keep)?;
                    rec.mean = slice_axis(&rec.mean, 0, keep)?;
                    rec.var = slice_axis(&rec.var, 0, keep)?;
                }
            }
        }
    }
    Ok(out)
}

/// Keep-list of a channel definer's output, in its consumers' input space.
fn resolve_keep<S: Scalar>(
    g: &Graph<S>,
    def_id: &str,
    kept: &BTreeMap<String, Vec<usize>>,
    shape_map: &BTreeMap<String, Vec<usize>>,
) -> Result<Option<Vec<usize>>> {
    let node = g.node(def_id)?;
    match node.kind {
        OpKind::Conv2d | OpKind::Linear | OpKind::DepthwiseConv2d => {
            Ok(node.ann.mask_group.as_ref().and_then(|gid| kept.get(gid)).cloned())
        }
        OpKind::Input | OpKind::SuperNetCombiner => Ok(None),
        OpKind::Flatten => {
            let prods = g.producers(def_id);
            let in_shape = &shape_map[&prods[0].0];
            let k: usize = if in_shape.len() > 2 { in_shape[2..].iter().product() } else { 1 };
            let inner_def = channel_definer(g, &prods[0].0)?;
            match resolve_keep(g, &inner_def, kept, shape_map)? {
                None => Ok(None),
                Some(chan_keep) => {
                    let mut expanded = Vec::with_capacity(chan_keep.len() * k);
                    for c in chan_keep {
                        for j in 0..k {
                            expanded.push(c * k + j);
                        }
                    }
                    Ok(Some(expanded))
                }
            }
        }
        OpKind::Concat => {
            let mut any = false;
            let mut pieces = Vec::new();
            for (src, _) in g.producers(def_id) {
                let inner_def = channel_definer(g, &src)?;
                let c = Graph::<S>::static_channels(&shape_map[&src]);
                match resolve_keep(g, &inner_def, kept, shape_map)? {
                    None => pieces.push((0..c).collect::<Vec<usize>>()),
                    Some(keep) => {
                        any = true;
                        pieces.push(keep);
                    }
                }
            }
            if !any {
                return Ok(None);
            }
            let mut offset = 0;
            let mut out = Vec::new();
            for ((src, _), keep) in g.producers(def_id).iter().zip(pieces) {
                let c = Graph::<S>::static_channels(&shape_map[src]);
                out.extend(keep.into_iter().map(|i| i + offset));
                offset += c;
            }
            Ok(Some(out))
        }
        _ => {
            // A transparent node slipped through; follow its definer.
            let def = channel_definer(g, def_id)?;
            if def == def_id {
                return Ok(None);
            }
            resolve_keep(g, &def, kept, shape_map)
        }
    }
}

/// Take the listed indices along one axis.
fn slice_axis<S: Scalar>(t: &Tensor<S>, axis: usize, keep: &[usize]) -> Result<Tensor<S>> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(ForgeError::shape(format!("slice axis {} out of range {:?}", axis, shape)));
    }
    let outer: usize = shape[..axis].iter().product();
    let ax = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if let Some(&bad) = keep.iter().find(|&&i| i >= ax) {
        return Err(ForgeError::shape(format!("keep index {} out of range {}", bad, ax)));
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = keep.len();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let base = (o * ax + k) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

fn export_mps<S: Scalar>(
    g: &Graph<S>,
    state: &crate::mps::MpsState<S>,
    report: &mut ExportReport,
) -> Result<Graph<S>> {
    let mut out = g.clone();
    for (node_id, choice) in &state.weight_choices {
        let (bits, _) = crate::mps::finalize(choice.theta.data(), &state.bitwidths);
        let node = out.node_mut(node_id)?;
        let q = node.ann.quant.get_or_insert(FixedQuant {
            weight_bits: None,
            act_bits: None,
            act_alpha: None,
        });
        q.weight_bits = Some(bits);
        let w = node.weight("weight")?;
        let mut absmax = S::ZERO;
        for v in w.data() {
            absmax = absmax.maxv(v.abs());
        }
        let qmax = ((1u64 << (bits - 1)) - 1) as f64;
        let scale = if absmax == S::ZERO { 1.0 } else { absmax.to_f64() / qmax };
        report.precisions.push(PrecisionAssignment {
            owner: format!("{}:w", node_id),
            bits,
            alpha: None,
            scale: Some(scale),
        });
    }
    for (owner_node, gid) in &state.act_owner {
        let choice = state
            .act_choices
            .get(gid)
            .ok_or_else(|| ForgeError::runtime(format!("activation group '{}' missing", gid)))?;
        let (bits, _) = crate::mps::finalize(choice.theta.data(), &state.bitwidths);
        let alpha = choice
            .alpha
            .as_ref()
            .map(|a| a.data()[0].to_f64())
            .ok_or_else(|| ForgeError::runtime(format!("activation group '{}' has no alpha", gid)))?;
        let node = out.node_mut(owner_node)?;
        let q = node.ann.quant.get_or_insert(FixedQuant {
            weight_bits: None,
            act_bits: None,
            act_alpha: None,
        });
        q.act_bits = Some(bits);
        q.act_alpha = Some(alpha);
    }
    for (gid, choice) in &state.act_choices {
        let (bits, _) = crate::mps::finalize(choice.theta.data(), &state.bitwidths);
        let alpha = choice.alpha.as_ref().map(|a| a.data()[0].to_f64()).unwrap_or(0.0);
        report.precisions.push(PrecisionAssignment {
            owner: format!("{}:act", gid),
            bits,
            alpha: Some(alpha),
            scale: Some(alpha / ((1u64 << bits) - 1) as f64),
        });
    }
    Ok(out)
}

/// Remove Identity nodes, rewiring producers straight to consumers.
fn strip_identities<S: Scalar>(g: &mut Graph<S>, report: &mut ExportReport) -> Result<()> {
    let ids: Vec<String> = g
        .nodes()
        .iter()
        .filter(|n| n.kind == OpKind::Identity)
        .map(|n| n.id.clone())
        .collect();
    for id in ids {
        let prods = g.producers(&id);
        if prods.len() != 1 {
            continue;
        }
        let src = prods[0].0.clone();
        let rewires: Vec<(String, usize)> = g
            .edges
            .iter()
            .filter(|e| e.src == id)
            .map(|e| (e.dst.clone(), e.slot))
            .collect();
        g.remove_node(&id)?;
        for (dst, slot) in rewires {
            g.add_edge(src.clone(), dst, slot);
        }
        report.removed_nodes.push(id);
    }
    Ok(())
}

/// Drop nodes that no longer sit on any input-to-output path (dead branches
/// after combiner removal). Declared inputs and outputs always stay.
fn prune_unreachable<S: Scalar>(g: &mut Graph<S>, report: &mut ExportReport) -> Result<()> {
    let mut fwd: BTreeSet<String> = g.inputs.iter().cloned().collect();
    loop {
        let mut grew = false;
        for e in &g.edges {
            if fwd.contains(&e.src) && fwd.insert(e.dst.clone()) {
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    let mut bwd: BTreeSet<String> = g.outputs.iter().cloned().collect();
    loop {
        let mut grew = false;
        for e in &g.edges {
            if bwd.contains(&e.dst) && bwd.insert(e.src.clone()) {
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    let dead: Vec<String> = g
        .nodes()
        .iter()
        .filter(|n| {
            !(fwd.contains(&n.id) && bwd.contains(&n.id))
                && !g.inputs.contains(&n.id)
                && !g.outputs.contains(&n.id)
        })
        .map(|n| n.id.clone())
        .collect();
    for id in dead {
        g.remove_node(&id)?;
        report.removed_nodes.push(id);
    }
    Ok(())
}
