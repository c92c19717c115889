//! Differentiable cost models over effective shapes and bitwidths.
//!
//! A [`CostSpec`] maps node patterns (kind, optional static-attribute
//! predicates) to named cost functions evaluated on a [`CostParamBag`] of
//! canonical per-layer quantities: geometry (`out_channels`, `in_channels`,
//! `kernel_h`, ...) and tensor bitwidths (`w_bits`, `in_bits`, `b_bits`).
//! Every quantity is either a static number or a differentiable effective
//! value substituted by the attached search method — channel counts become
//! `sum H(theta)` under mask search, bitwidths become softmax-expected values
//! under precision search — so one spec text evaluates unchanged on plain,
//! mask-attached, supernet and mixed-precision graphs.
//!
//! Built-in specs: `params` (element count), `params_bytes` (bitwidth-aware
//! storage), `macs` (multiply-accumulates per sample).

use crate::error::{ForgeError, Result};
use crate::graph::exec::{MethodState, Searchable};
use crate::graph::{shapes, ChanSrc, Graph, Node, OpKind, Params};
use crate::mps::MpsState;
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use serde_json::Value as Json;
use std::collections::BTreeMap;
use std::sync::Arc;

/// A per-layer quantity: static, or a differentiable scalar on the tape.
#[derive(Debug, Clone, Copy)]
pub enum Val {
    Static(f64),
    Dyn(Var),
}

/// Canonical parameter bag for one matched node.
#[derive(Debug)]
pub struct CostParamBag {
    pub node: String,
    pub kind: OpKind,
    values: BTreeMap<&'static str, Val>,
}

impl CostParamBag {
    pub fn get(&self, name: &str) -> Result<Val> {
        self.values.get(name).copied().ok_or_else(|| {
            ForgeError::config(format!(
                "cost function asked for '{}' which node '{}' ({}) does not provide",
                name,
                self.node,
                self.kind.name()
            ))
        })
    }

    /// Static value of an attribute, `None` if absent or effective.
    pub fn static_attr(&self, name: &str) -> Option<f64> {
        match self.values.get(name) {
            Some(Val::Static(v)) => Some(*v),
            _ => None,
        }
    }
}

/// Scalar arithmetic over mixed static/dynamic values.
pub struct CostCtx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
}

impl<'a, S: Scalar> CostCtx<'a, S> {
    pub fn lift(&mut self, v: Val) -> Var {
        match v {
            Val::Dyn(v) => v,
            Val::Static(c) => self.tape.constant(Tensor::scalar(S::from_f64(c))),
        }
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        Ok(match (a, b) {
            (Val::Static(x), Val::Static(y)) => Val::Static(x * y),
            (Val::Static(x), Val::Dyn(v)) | (Val::Dyn(v), Val::Static(x)) => {
                Val::Dyn(ops::scale(self.tape, v, x))
            }
            (Val::Dyn(x), Val::Dyn(y)) => Val::Dyn(ops::mul(self.tape, x, y)?),
        })
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        Ok(match (a, b) {
            (Val::Static(x), Val::Static(y)) => Val::Static(x + y),
            (Val::Static(x), Val::Dyn(v)) | (Val::Dyn(v), Val::Static(x)) => {
                Val::Dyn(ops::add_const(self.tape, v, x))
            }
            (Val::Dyn(x), Val::Dyn(y)) => Val::Dyn(ops::add(self.tape, x, y)?),
        })
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        match a {
            Val::Static(x) => Val::Static(x * c),
            Val::Dyn(v) => Val::Dyn(ops::scale(self.tape, v, c)),
        }
    }

    /// max(lo, v) built from relu: lo + relu(v - lo).
    pub fn max_with(&mut self, a: Val, lo: f64) -> Val {
        match a {
            Val::Static(x) => Val::Static(x.max(lo)),
            Val::Dyn(v) => {
                let shifted = ops::add_const(self.tape, v, -lo);
                let r = ops::relu(self.tape, shifted);
                Val::Dyn(ops::add_const(self.tape, r, lo))
            }
        }
    }
}

pub type CostFn<S> =
    Arc<dyn Fn(&mut CostCtx<'_, S>, &CostParamBag, &Json) -> Result<Val> + Send + Sync>;

/// Named cost functions a spec's rules can reference. Starts with the
/// builtins; extend through [`CostFnRegistry::register`].
pub struct CostFnRegistry<S: Scalar> {
    fns: BTreeMap<String, CostFn<S>>,
}

impl<S: Scalar> Default for CostFnRegistry<S> {
    fn default() -> Self {
        Self::builtin()
    }
}

impl<S: Scalar> CostFnRegistry<S> {
    pub fn builtin() -> Self {
        let mut r = CostFnRegistry { fns: BTreeMap::new() };
        r.register("zero", |_, _, _| Ok(Val::Static(0.0)));
        r.register("params", |ctx, bag, _| {
            let w = weight_count(ctx, bag)?;
            let b = bias_count(ctx, bag)?;
            ctx.add(w, b)
        });
        r.register("params_bytes", |ctx, bag, _| {
            let w = weight_count(ctx, bag)?;
            let wb = bag.get("w_bits")?;
            let wbits = ctx.mul(w, wb)?;
            let b = bias_count(ctx, bag)?;
            let bb = bag.get("b_bits")?;
            let bbits = ctx.mul(b, bb)?;
            let total = ctx.add(wbits, bbits)?;
            Ok(ctx.scale(total, 1.0 / 8.0))
        });
        r.register("macs", |ctx, bag, _| {
            let w = weight_count_no_bias(ctx, bag)?;
            let oh = bag.get("out_h")?;
            let ow = bag.get("out_w")?;
            let spatial = ctx.mul(oh, ow)?;
            ctx.mul(w, spatial)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&mut CostCtx<'_, S>, &CostParamBag, &Json) -> Result<Val> + Send + Sync + 'static,
    ) {
        self.fns.insert(name.to_string(), Arc::new(f));
    }

    fn get(&self, name: &str) -> Result<&CostFn<S>> {
        self.fns
            .get(name)
            .ok_or_else(|| ForgeError::config(format!("unknown cost function '{}'", name)))
    }
}

fn weight_count_no_bias<S: Scalar>(ctx: &mut CostCtx<'_, S>, bag: &CostParamBag) -> Result<Val> {
    let out = bag.get("out_channels")?;
    let inpg = bag.get("in_channels_per_group")?;
    let kh = bag.get("kernel_h")?;
    let kw = bag.get("kernel_w")?;
    let k = ctx.mul(kh, kw)?;
    let oi = ctx.mul(out, inpg)?;
    ctx.mul(oi, k)
}

fn weight_count<S: Scalar>(ctx: &mut CostCtx<'_, S>, bag: &CostParamBag) -> Result<Val> {
    weight_count_no_bias(ctx, bag)
}

fn bias_count<S: Scalar>(ctx: &mut CostCtx<'_, S>, bag: &CostParamBag) -> Result<Val> {
    let has = bag.get("bias")?;
    let out = bag.get("out_channels")?;
    match has {
        Val::Static(b) if b == 0.0 => Ok(Val::Static(0.0)),
        _ => ctx.mul(has, out),
    }
}

/// What to do with nodes no rule matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultBehavior {
    Zero,
    Error,
}

#[derive(Debug, Clone)]
pub struct RuleMatch {
    pub kind: Option<OpKind>,
    /// Equality predicates on static bag attributes.
    pub attrs: Vec<(String, f64)>,
}

impl RuleMatch {
    fn matches(&self, bag: &CostParamBag) -> bool {
        if let Some(k) = &self.kind {
            if *k != bag.kind {
                return false;
            }
        }
        self.attrs.iter().all(|(name, v)| {
            bag.static_attr(name).map(|a| (a - v).abs() < 1e-9).unwrap_or(false)
        })
    }
}

#[derive(Clone)]
pub struct CostRule {
    pub matcher: RuleMatch,
    pub cost_fn: String,
    pub args: Json,
}

/// Ordered pattern -> cost-function map; first matching rule wins.
#[derive(Clone)]
pub struct CostSpec {
    pub name: String,
    pub default: DefaultBehavior,
    pub rules: Vec<CostRule>,
}

impl CostSpec {
    fn target_rules(name: &str, f: &str) -> CostSpec {
        let rule = |kind| CostRule {
            matcher: RuleMatch { kind: Some(kind), attrs: Vec::new() },
            cost_fn: f.to_string(),
            args: Json::Null,
        };
        CostSpec {
            name: name.to_string(),
            default: DefaultBehavior::Zero,
            rules: vec![
                rule(OpKind::Conv2d),
                rule(OpKind::DepthwiseConv2d),
                rule(OpKind::Linear),
            ],
        }
    }

    /// Trainable parameter count.
    pub fn params() -> CostSpec {
        Self::target_rules("params", "params")
    }

    /// Bitwidth-aware storage size in bytes.
    pub fn params_bytes() -> CostSpec {
        Self::target_rules("params_bytes", "params_bytes")
    }

    /// Multiply-accumulate operations per sample.
    pub fn macs() -> CostSpec {
        Self::target_rules("macs", "macs")
    }

    pub fn builtin(name: &str) -> Result<CostSpec> {
        match name {
            "params" => Ok(Self::params()),
            "params_bytes" => Ok(Self::params_bytes()),
            "macs" => Ok(Self::macs()),
            other => Err(ForgeError::config(format!("unknown built-in cost spec '{}'", other))),
        }
    }

    /// Parse the JSON spec file format:
    /// `{"name", "default": "zero"|"error",
    ///   "rules": [{"match": {"kind": ..., "attrs": {...}}, "cost": "<fn>", "args": {...}}]}`.
    pub fn from_json(text: &str) -> Result<CostSpec> {
        let v: Json = serde_json::from_str(text)?;
        let name = v
            .get("name")
            .and_then(|n| n.as_str())
            .ok_or_else(|| ForgeError::config("cost spec: missing 'name'".to_string()))?
            .to_string();
        let default = match v.get("default").and_then(|d| d.as_str()).unwrap_or("zero") {
            "zero" => DefaultBehavior::Zero,
            "error" => DefaultBehavior::Error,
            other => {
                return Err(ForgeError::config(format!(
                    "cost spec '{}': unknown default '{}'",
                    name, other
                )))
            }
        };
        let mut rules = Vec::new();
        for (i, rv) in v
            .get("rules")
            .and_then(|r| r.as_array())
            .ok_or_else(|| ForgeError::config(format!("cost spec '{}': missing 'rules'", name)))?
            .iter()
            .enumerate()
        {
            let m = rv.get("match").cloned().unwrap_or(Json::Null);
            let kind = match m.get("kind").and_then(|k| k.as_str()) {
                Some(k) => Some(OpKind::from_name(k).ok_or_else(|| {
                    ForgeError::config(format!("cost spec '{}': unknown kind '{}'", name, k))
                })?),
                None => None,
            };
            let mut attrs = Vec::new();
            if let Some(obj) = m.get("attrs").and_then(|a| a.as_object()) {
                for (an, av) in obj {
                    let f = av.as_f64().ok_or_else(|| {
                        ForgeError::config(format!(
                            "cost spec '{}': attr '{}' must be numeric",
                            name, an
                        ))
                    })?;
                    attrs.push((an.clone(), f));
                }
            }
            let cost_fn = rv
                .get("cost")
                .and_then(|c| c.as_str())
                .ok_or_else(|| {
                    ForgeError::config(format!("cost spec '{}': rule {} missing 'cost'", name, i))
                })?
                .to_string();
            let args = rv.get("args").cloned().unwrap_or(Json::Null);
            rules.push(CostRule { matcher: RuleMatch { kind, attrs }, cost_fn, args });
        }
        Ok(CostSpec { name, default, rules })
    }
}

// ---------------------------------------------------------------------------
// Effective-value resolution
// ---------------------------------------------------------------------------

struct EffCtx<'a, S: Scalar> {
    sg: &'a Searchable<S>,
    param_vars: &'a BTreeMap<String, Var>,
    shapes: &'a BTreeMap<String, Vec<usize>>,
    group_count: BTreeMap<String, Val>,
    bits_memo: BTreeMap<String, Val>,
}

impl<'a, S: Scalar> EffCtx<'a, S> {
    /// Leaf var for a parameter key; falls back to a tape constant when the
    /// caller did not register leaves (static evaluation).
    fn theta_var(&self, tape: &mut Tape<S>, key: &str, master: &Tensor<S>) -> Var {
        match self.param_vars.get(key) {
            Some(v) => *v,
            None => tape.constant(master.clone()),
        }
    }

    fn group_count(&mut self, tape: &mut Tape<S>, gid: &str) -> Result<Val> {
        if let Some(v) = self.group_count.get(gid) {
            return Ok(*v);
        }
        let val = match &self.sg.method {
            MethodState::Pit(pit) => match pit.masks.get(gid) {
                Some(mask) => {
                    let theta =
                        self.theta_var(tape, &format!("pit.{}.theta", gid), &mask.theta);
                    Val::Dyn(crate::pit::effective_channel_count(tape, theta, pit.threshold))
                }
                None => {
                    let group = pit
                        .groups
                        .iter()
                        .find(|g| g.id == gid)
                        .ok_or_else(|| ForgeError::runtime(format!("unknown mask group '{}'", gid)))?;
                    Val::Static(group.channels as f64)
                }
            },
            _ => return Err(ForgeError::runtime(format!("mask group '{}' without mask search", gid))),
        };
        self.group_count.insert(gid.to_string(), val);
        Ok(val)
    }

    fn static_channels(&self, id: &str) -> Result<f64> {
        let s = self
            .shapes
            .get(id)
            .ok_or_else(|| ForgeError::runtime(format!("no inferred shape for '{}'", id)))?;
        Ok(Graph::<S>::static_channels(s) as f64)
    }

    /// Effective output channel count of a node, through the calculator links.
    fn eff_out_channels(&mut self, tape: &mut Tape<S>, id: &str) -> Result<Val> {
        let node = self.sg.graph.node(id)?;
        let src = match &node.ann.chan_src {
            None => return Ok(Val::Static(self.static_channels(id)?)),
            Some(s) => s.clone(),
        };
        match src {
            ChanSrc::Own => match &node.ann.mask_group {
                Some(gid) if matches!(self.sg.method, MethodState::Pit(_)) => {
                    let gid = gid.clone();
                    self.group_count(tape, &gid)
                }
                _ => Ok(Val::Static(self.static_channels(id)?)),
            },
            ChanSrc::Fixed(c) => Ok(Val::Static(c as f64)),
            ChanSrc::Follow(d) => {
                // Depthwise convs are followers but can carry a mask group of
                // their own (shared with the definer); both resolve the same.
                self.eff_out_channels(tape, &d)
            }
            ChanSrc::FlattenOf { src, k } => {
                let base = self.eff_out_channels(tape, &src)?;
                let mut ctx = CostCtx { tape };
                Ok(ctx.scale(base, k as f64))
            }
            ChanSrc::ConcatOf(srcs) => {
                let mut acc = Val::Static(0.0);
                for s in srcs {
                    let v = self.eff_out_channels(tape, &s)?;
                    let mut ctx = CostCtx { tape };
                    acc = ctx.add(acc, v)?;
                }
                Ok(acc)
            }
        }
    }

    /// Effective input channel count: the producer's effective output.
    fn eff_in_channels(&mut self, tape: &mut Tape<S>, id: &str) -> Result<Val> {
        let prods = self.sg.graph.producers(id);
        if prods.is_empty() {
            return Err(ForgeError::runtime(format!("node '{}' has no input", id)));
        }
        let src = &prods[0].0;
        let src_node = self.sg.graph.node(src)?;
        match &src_node.ann.chan_src {
            None => Ok(Val::Static(self.static_channels(src)?)),
            Some(ChanSrc::Follow(d)) => {
                let d = d.clone();
                self.eff_out_channels(tape, &d)
            }
            Some(_) => {
                let src = src.clone();
                self.eff_out_channels(tape, &src)
            }
        }
    }

    /// Effective weight bitwidth of a target node.
    fn eff_w_bits(&mut self, tape: &mut Tape<S>, node: &Node<S>) -> Result<Val> {
        let key = format!("w:{}", node.id);
        if let Some(v) = self.bits_memo.get(&key) {
            return Ok(*v);
        }
        let val = if let MethodState::Mps(mps) = &self.sg.method {
            match mps.weight_choices.get(&node.id) {
                Some(choice) => {
                    let owner = MpsState::<S>::weight_owner(&node.id);
                    let theta =
                        self.theta_var(tape, &format!("mps.{}.theta", owner), &choice.theta);
                    Val::Dyn(crate::mps::effective_bitwidth(tape, theta, &mps.bitwidths)?)
                }
                None => Val::Static(32.0),
            }
        } else if let Some(q) = &node.ann.quant {
            match q.weight_bits {
                Some(b) => Val::Static(b as f64),
                None => Val::Static(32.0),
            }
        } else {
            Val::Static(32.0)
        };
        self.bits_memo.insert(key, val);
        Ok(val)
    }

    /// Effective input-activation bitwidth of a target node.
    fn eff_in_bits(&mut self, tape: &mut Tape<S>, node: &Node<S>) -> Result<Val> {
        let key = format!("in:{}", node.id);
        if let Some(v) = self.bits_memo.get(&key) {
            return Ok(*v);
        }
        let val = if let MethodState::Mps(mps) = &self.sg.method {
            match mps.input_bits_src.get(&node.id) {
                Some(gid) => {
                    let choice = mps.act_choices.get(gid).ok_or_else(|| {
                        ForgeError::runtime(format!("activation group '{}' missing", gid))
                    })?;
                    let owner = MpsState::<S>::act_owner_key(gid);
                    let theta =
                        self.theta_var(tape, &format!("mps.{}.theta", owner), &choice.theta);
                    Val::Dyn(crate::mps::effective_bitwidth(tape, theta, &mps.bitwidths)?)
                }
                None => Val::Static(32.0),
            }
        } else {
            // Frozen graphs: nearest upstream quantization point, 32 if none.
            Val::Static(self.frozen_in_bits(&node.id)?)
        };
        self.bits_memo.insert(key, val);
        Ok(val)
    }

    fn frozen_in_bits(&self, id: &str) -> Result<f64> {
        let mut stack: Vec<String> =
            self.sg.graph.producers(id).into_iter().map(|(s, _)| s).collect();
        let mut best: Option<f64> = None;
        while let Some(cur) = stack.pop() {
            let n = self.sg.graph.node(&cur)?;
            if let Some(q) = &n.ann.quant {
                if let Some(b) = q.act_bits {
                    best = Some(best.map_or(b as f64, |x: f64| x.max(b as f64)));
                    continue;
                }
            }
            if n.kind == OpKind::Input || n.kind.is_target() {
                return Ok(32.0);
            }
            stack.extend(self.sg.graph.producers(&cur).into_iter().map(|(s, _)| s));
        }
        Ok(best.unwrap_or(32.0))
    }
}

/// Build the canonical parameter bag for a node.
fn build_bag<S: Scalar>(
    tape: &mut Tape<S>,
    eff: &mut EffCtx<'_, S>,
    node: &Node<S>,
) -> Result<CostParamBag> {
    let mut values: BTreeMap<&'static str, Val> = BTreeMap::new();
    let shape = eff
        .shapes
        .get(&node.id)
        .ok_or_else(|| ForgeError::runtime(format!("no inferred shape for '{}'", node.id)))?
        .clone();
    let (oh, ow) = if shape.len() == 4 { (shape[2], shape[3]) } else { (1, 1) };
    values.insert("out_h", Val::Static(oh as f64));
    values.insert("out_w", Val::Static(ow as f64));

    match (&node.kind, &node.params) {
        (OpKind::Conv2d, Params::Conv(p)) => {
            let out = eff.eff_out_channels(tape, &node.id)?;
            let inp = eff.eff_in_channels(tape, &node.id)?;
            values.insert("out_channels", out);
            values.insert("in_channels", inp);
            let per_group = if p.groups == 1 {
                inp
            } else {
                Val::Static((p.in_channels / p.groups) as f64)
            };
            values.insert("in_channels_per_group", per_group);
            values.insert("groups", Val::Static(p.groups as f64));
            values.insert("kernel_h", Val::Static(p.kernel.0 as f64));
            values.insert("kernel_w", Val::Static(p.kernel.1 as f64));
            values.insert("stride_h", Val::Static(p.stride.0 as f64));
            values.insert("stride_w", Val::Static(p.stride.1 as f64));
            values.insert("bias", Val::Static(if p.bias { 1.0 } else { 0.0 }));
        }
        (OpKind::DepthwiseConv2d, Params::DwConv(p)) => {
            let out = eff.eff_out_channels(tape, &node.id)?;
            values.insert("out_channels", out);
            values.insert("in_channels", out);
            values.insert("in_channels_per_group", Val::Static(1.0));
            values.insert("groups", Val::Static(p.channels as f64));
            values.insert("kernel_h", Val::Static(p.kernel.0 as f64));
            values.insert("kernel_w", Val::Static(p.kernel.1 as f64));
            values.insert("stride_h", Val::Static(p.stride.0 as f64));
            values.insert("stride_w", Val::Static(p.stride.1 as f64));
            values.insert("bias", Val::Static(if p.bias { 1.0 } else { 0.0 }));
        }
        (OpKind::Linear, Params::Linear(p)) => {
            let out = eff.eff_out_channels(tape, &node.id)?;
            let inp = eff.eff_in_channels(tape, &node.id)?;
            values.insert("out_channels", out);
            values.insert("in_channels", inp);
            values.insert("out_features", out);
            values.insert("in_features", inp);
            values.insert("in_channels_per_group", inp);
            values.insert("groups", Val::Static(1.0));
            values.insert("kernel_h", Val::Static(1.0));
            values.insert("kernel_w", Val::Static(1.0));
            values.insert("bias", Val::Static(if p.bias { 1.0 } else { 0.0 }));
        }
        (OpKind::BatchNorm, Params::BatchNorm(p)) => {
            values.insert("num_features", Val::Static(p.num_features as f64));
            values.insert("out_channels", Val::Static(p.num_features as f64));
        }
        _ => {
            values.insert("out_channels", Val::Static(Graph::<S>::static_channels(&shape) as f64));
        }
    }

    if node.kind.is_target() {
        let wb = eff.eff_w_bits(tape, node)?;
        values.insert("w_bits", wb);
        let ib = eff.eff_in_bits(tape, node)?;
        values.insert("in_bits", ib);
        // Biases ride at the weight bitwidth but never below 8 bits.
        let mut ctx = CostCtx { tape };
        let bb = ctx.max_with(wb, 8.0);
        values.insert("b_bits", bb);
    }

    Ok(CostParamBag { node: node.id.clone(), kind: node.kind, values })
}

// ---------------------------------------------------------------------------
// get_cost
// ---------------------------------------------------------------------------

/// Evaluate a cost spec over a searchable graph as a differentiable scalar on
/// the tape.
///
/// `param_vars` are the leaves registered by the executor for this tape, so
/// the cost shares architecture parameters with the task loss; pass an empty
/// map for static evaluation of frozen graphs. Supernet branch members are
/// folded into softmax-expected branch costs at their combiner.
pub fn get_cost<S: Scalar>(
    tape: &mut Tape<S>,
    param_vars: &BTreeMap<String, Var>,
    sg: &Searchable<S>,
    spec: &CostSpec,
    registry: &CostFnRegistry<S>,
) -> Result<Var> {
    let shapes = shapes::infer_shapes(&sg.graph, 1)?;
    let mut eff = EffCtx {
        sg,
        param_vars,
        shapes: &shapes,
        group_count: BTreeMap::new(),
        bits_memo: BTreeMap::new(),
    };

    // Branch membership for supernet accounting.
    let mut branch_of: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for node in sg.graph.nodes() {
        if let Params::Combiner { branches } = &node.params {
            for (bi, members) in branches.iter().enumerate() {
                for m in members {
                    branch_of.insert(m.clone(), (node.id.clone(), bi));
                }
            }
        }
    }
    let mut branch_costs: BTreeMap<String, Vec<Val>> = BTreeMap::new();
    for node in sg.graph.nodes() {
        if let Params::Combiner { branches } = &node.params {
            branch_costs.insert(node.id.clone(), vec![Val::Static(0.0); branches.len()]);
        }
    }

    let mut total = Val::Static(0.0);
    for id in sg.graph.topo_order()? {
        let node = sg.graph.node(&id)?;
        if node.kind == OpKind::SuperNetCombiner {
            continue;
        }
        let bag = build_bag(tape, &mut eff, node)?;
        let rule = spec.rules.iter().find(|r| r.matcher.matches(&bag));
        let val = match rule {
            Some(r) => {
                let f = registry.get(&r.cost_fn)?;
                let mut ctx = CostCtx { tape };
                f(&mut ctx, &bag, &r.args)?
            }
            None => match spec.default {
                DefaultBehavior::Zero => continue,
                DefaultBehavior::Error => {
                    return Err(ForgeError::config(format!(
                        "cost spec '{}' has no rule for node '{}' of kind {}",
                        spec.name,
                        id,
                        node.kind.name()
                    )))
                }
            },
        };
        match branch_of.get(&id) {
            Some((comb, bi)) => {
                let slot = &mut branch_costs.get_mut(comb).expect("combiner listed")[*bi];
                let mut ctx = CostCtx { tape };
                *slot = ctx.add(*slot, val)?;
            }
            None => {
                let mut ctx = CostCtx { tape };
                total = ctx.add(total, val)?;
            }
        }
    }

    // Expected branch cost per combiner under zero-noise softmax weights.
    for (comb_id, costs) in branch_costs {
        let node = sg.graph.node(&comb_id)?;
        let theta_master = node.weight("theta")?;
        let key = format!("supernet.{}.theta", comb_id);
        let theta = eff.theta_var(tape, &key, theta_master);
        let tau = match &sg.method {
            MethodState::Supernet(st) => st.tau,
            _ => 1.0,
        };
        let cost_vars: Vec<Var> = {
            let mut ctx = CostCtx { tape };
            costs.iter().map(|c| ctx.lift(*c)).collect()
        };
        let expected = crate::supernet::expected_branch_cost(tape, theta, tau, &cost_vars)?;
        let mut ctx = CostCtx { tape };
        total = ctx.add(total, Val::Dyn(expected))?;
    }

    let mut ctx = CostCtx { tape };
    Ok(ctx.lift(total))
}

/// Static value of a cost spec on a frozen graph.
pub fn static_cost<S: Scalar>(sg: &Searchable<S>, spec: &CostSpec) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let registry = CostFnRegistry::builtin();
    let v = get_cost(&mut tape, &BTreeMap::new(), sg, spec, &registry)?;
    Ok(tape.item(v).to_f64())
}

// ---------------------------------------------------------------------------
// Combining task loss with named costs
// ---------------------------------------------------------------------------

/// One term of the total loss: `weight * cost` or a hinge
/// `weight * max(0, cost - budget)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostTerm {
    pub cost: String,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hinge_budget: Option<f64>,
}

/// Total loss: task loss plus the weighted cost terms. Non-finite cost values
/// fail with the offending cost named.
pub fn combine_costs<S: Scalar>(
    tape: &mut Tape<S>,
    task_loss: Var,
    costs: &[(String, Var)],
    terms: &[CostTerm],
) -> Result<Var> {
    for (name, v) in costs {
        if !tape.item(*v).is_finite() {
            return Err(ForgeError::runtime(format!("cost '{}' is not finite", name)));
        }
    }
    let mut total = task_loss;
    for term in terms {
        let (_, cv) = costs
            .iter()
            .find(|(n, _)| n == &term.cost)
            .ok_or_else(|| ForgeError::config(format!("combiner references unknown cost '{}'", term.cost)))?;
        let contrib = match term.hinge_budget {
            Some(budget) => {
                let shifted = ops::add_const(tape, *cv, -budget);
                ops::relu(tape, shifted)
            }
            None => *cv,
        };
        let scaled = ops::scale(tape, contrib, term.weight);
        total = ops::add(tape, total, scaled)?;
    }
    Ok(total)
}
