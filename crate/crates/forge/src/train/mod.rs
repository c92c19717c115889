//! Training harness: joint weight/architecture descent, lambda sweeps and
//! sequential method pipelines.
//!
//! One searchable graph is trained by minibatch gradient descent on
//! `task_loss + lambda * cost`, with separate optimizers for the network
//! weights (SGD with momentum) and the architecture parameters (Adam).
//! Architecture parameters stay frozen for a warm-up fraction of the epochs
//! so the weights become informative before the search acts.

pub mod data;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod state;
pub mod sweep;

use crate::cost::{combine_costs, get_cost, CostFnRegistry, CostSpec, CostTerm};
use crate::error::{ForgeError, Result};
use crate::graph::exec::{self, ExecOpts, MethodState, Searchable};
use crate::graph::{schema, Graph};
use crate::passes::{self, ExcludeRule, PassReport};
use crate::tensor::ops;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Where the seed network comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedGraph {
    /// A named built-in model (see [`models::builtin_graph`]).
    Builtin(String),
    /// Path to a graph directory (graph.json + optional weights.dnft).
    Path(String),
}

/// Exclusion rule in config form: exactly one of `id` or `kind`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl ExcludeSpec {
    pub fn to_rule(&self) -> Result<ExcludeRule> {
        match (&self.id, &self.kind) {
            (Some(id), None) => Ok(ExcludeRule::Id(id.clone())),
            (None, Some(k)) => crate::graph::OpKind::from_name(k)
                .map(ExcludeRule::Kind)
                .ok_or_else(|| ForgeError::config(format!("unknown kind '{}' in exclude rule", k))),
            _ => Err(ForgeError::config(
                "exclude rule needs exactly one of 'id' or 'kind'".to_string(),
            )),
        }
    }
}

/// Additional cost term beyond the swept `lambda * stage_cost`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtraCostTerm {
    /// Built-in cost spec name.
    pub cost: String,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hinge_budget: Option<f64>,
    /// Multiply the weight by the run's lambda.
    #[serde(default)]
    pub lambda_scaled: bool,
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-2
}
fn d_momentum() -> f64 {
    0.9
}
fn d_warmup() -> f64 {
    0.1
}
fn d_tau() -> f64 {
    1.0
}
fn d_finetune() -> usize {
    5
}
fn d_sizes() -> (usize, usize, usize) {
    data::DEFAULT_SIZES
}
fn d_true() -> bool {
    true
}
fn d_bits() -> Vec<u32> {
    crate::mps::DEFAULT_BITWIDTHS.to_vec()
}

/// A full experiment description: task, seed network, method chain, lambda
/// grid and training hyper-parameters. Serialized as the config file the CLI
/// consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: String,
    pub seed_graph: SeedGraph,
    /// Ordered subset of ["supernet", "pit", "mps"].
    pub chain: Vec<String>,
    /// Per-stage built-in cost spec names; defaults: params for the NAS
    /// stages, params_bytes for mps.
    #[serde(default)]
    pub stage_costs: BTreeMap<String, String>,
    pub lambdas: Vec<f64>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr_weights: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_lr")]
    pub lr_arch: f64,
    /// Fraction of epochs with architecture parameters frozen.
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "d_tau")]
    pub tau_start: f64,
    #[serde(default = "d_tau")]
    pub tau_end: f64,
    #[serde(default = "d_finetune")]
    pub finetune_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub export_dir: String,
    #[serde(default = "d_sizes")]
    pub dataset_sizes: (usize, usize, usize),
    /// Record wall-clock seconds in sweep records. Disable for bitwise
    /// reproducible output files.
    #[serde(default = "d_true")]
    pub record_seconds: bool,
    /// Per-stage exclusion rules keyed by stage name.
    #[serde(default)]
    pub exclude: BTreeMap<String, Vec<ExcludeSpec>>,
    #[serde(default = "d_bits")]
    pub bitwidths: Vec<u32>,
    #[serde(default)]
    pub extra_cost_terms: Vec<ExtraCostTerm>,
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain.is_empty() {
            return Err(ForgeError::config("empty method chain".to_string()));
        }
        pipeline::validate_chain(&self.chain)?;
        if self.lambdas.is_empty() {
            return Err(ForgeError::config("empty lambda list".to_string()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ForgeError::config("epochs and batch_size must be positive".to_string()));
        }
        for stage in self.exclude.keys() {
            if !["supernet", "pit", "mps"].contains(&stage.as_str()) {
                return Err(ForgeError::config(format!("exclude rules for unknown stage '{}'", stage)));
            }
        }
        Ok(())
    }

    pub fn load_seed(&self) -> Result<Graph<f32>> {
        match &self.seed_graph {
            SeedGraph::Builtin(name) => models::builtin_graph(name),
            SeedGraph::Path(p) => schema::load_graph_dir(std::path::Path::new(p)),
        }
    }

    pub fn exclude_rules(&self, stage: &str) -> Result<Vec<ExcludeRule>> {
        self.exclude
            .get(stage)
            .map(|specs| specs.iter().map(|s| s.to_rule()).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    pub fn stage_cost_name(&self, stage: &str) -> String {
        self.stage_costs.get(stage).cloned().unwrap_or_else(|| {
            match stage {
                "mps" => "params_bytes",
                _ => "params",
            }
            .to_string()
        })
    }
}

/// Attach a method to a plain graph, running the conversion passes it needs.
pub fn prepare(g: Graph<f32>, stage: &str, cfg: &ExperimentConfig) -> Result<(Searchable<f32>, PassReport)> {
    let mut report = PassReport::default();
    match stage {
        "supernet" => {
            let state = crate::supernet::attach(&g, cfg.tau_start)?;
            Ok((Searchable { graph: g, method: MethodState::Supernet(state) }, report))
        }
        "pit" => {
            let (mut folded, fold_list, mut warns) = passes::fold_bn(&g)?;
            report.folded_bn = fold_list;
            report.warnings.append(&mut warns);
            let rules = cfg.exclude_rules("pit")?;
            let (targets, mut warns) = passes::identify_targets(&folded, &rules)?;
            report.warnings.append(&mut warns);
            let groups = passes::share_masks(&folded, &targets)?;
            passes::attach_calculators(&mut folded, &groups)?;
            let state = crate::pit::attach(&folded, &groups)?;
            report.targets = targets;
            report.groups = groups;
            Ok((Searchable { graph: folded, method: MethodState::Pit(state) }, report))
        }
        "mps" => {
            let (folded, fold_list, mut warns) = passes::fold_bn(&g)?;
            report.folded_bn = fold_list;
            report.warnings.append(&mut warns);
            let rules = cfg.exclude_rules("mps")?;
            let (state, mut warns) = crate::mps::attach(&folded, &rules, &cfg.bitwidths)?;
            report.warnings.append(&mut warns);
            report.targets = state.weight_choices.keys().cloned().collect();
            Ok((Searchable { graph: folded, method: MethodState::Mps(state) }, report))
        }
        other => Err(ForgeError::config(format!("unknown method '{}'", other))),
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub cost: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

/// Train a searchable graph for `cfg.epochs` epochs of minibatch descent on
/// `cross_entropy + lambda * stage_cost (+ extra terms)`, jointly over the
/// weights and the architecture parameters.
pub fn train_search(
    sg: &mut Searchable<f32>,
    splits: &data::Splits,
    cfg: &ExperimentConfig,
    lambda: f64,
    stage: &str,
    run_seed: u64,
) -> Result<History> {
    train_loop(sg, splits, cfg, lambda, stage, run_seed, cfg.epochs)
}

fn is_arch_key(key: &str) -> bool {
    key.starts_with("pit.") || key.starts_with("mps.") || key.starts_with("supernet.")
}

fn train_loop(
    sg: &mut Searchable<f32>,
    splits: &data::Splits,
    cfg: &ExperimentConfig,
    lambda: f64,
    stage: &str,
    run_seed: u64,
    epochs: usize,
) -> Result<History> {
    let spec = CostSpec::builtin(&cfg.stage_cost_name(stage))?;
    let registry = CostFnRegistry::builtin();
    let extra_specs: Vec<CostSpec> = cfg
        .extra_cost_terms
        .iter()
        .map(|t| CostSpec::builtin(&t.cost))
        .collect::<Result<_>>()?;

    let mut opt_w = optim::Optimizer::sgd(cfg.lr_weights, cfg.momentum);
    let mut opt_theta = optim::Optimizer::adam(cfg.lr_arch);
    let warmup_epochs = ((epochs as f64) * cfg.warmup_frac).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut history = History::default();
    let n = splits.train.len();

    for epoch in 0..epochs {
        let t0 = std::time::Instant::now();
        // Linear temperature anneal for supernet sampling.
        if let MethodState::Supernet(st) = &mut sg.method {
            let f = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
            st.tau = cfg.tau_start + (cfg.tau_end - cfg.tau_start) * f;
        }
        let theta_frozen = epoch < warmup_epochs;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut cost_sum = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = splits.train.batch(chunk);
            let mut exec = exec::execute(sg, &[x], ExecOpts::train(), &mut rng)
                .map_err(|e| ForgeError::runtime(format!("epoch {} batch {}: {}", epoch, bi, e)))?;
            let logits = exec.outputs[0];
            correct += count_correct(&exec.tape, logits, &labels);
            let task_loss = ops::cross_entropy(&mut exec.tape, logits, &labels)?;

            let mut costs = Vec::new();
            let mut terms = Vec::new();
            let cost_var = get_cost(&mut exec.tape, &exec.param_vars, sg, &spec, &registry)?;
            cost_sum += exec.tape.item(cost_var) as f64;
            costs.push((spec.name.clone(), cost_var));
            terms.push(CostTerm { cost: spec.name.clone(), weight: lambda, hinge_budget: None });
            for (term, espec) in cfg.extra_cost_terms.iter().zip(&extra_specs) {
                let v = get_cost(&mut exec.tape, &exec.param_vars, sg, espec, &registry)?;
                let name = format!("extra:{}", espec.name);
                costs.push((name.clone(), v));
                terms.push(CostTerm {
                    cost: name,
                    weight: if term.lambda_scaled { term.weight * lambda } else { term.weight },
                    hinge_budget: term.hinge_budget,
                });
            }
            let total = combine_costs(&mut exec.tape, task_loss, &costs, &terms)?;
            let total_val = exec.tape.item(total) as f64;
            if !total_val.is_finite() {
                return Err(ForgeError::runtime(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch, bi
                )));
            }
            loss_sum += exec.tape.item(task_loss) as f64 * chunk.len() as f64;

            exec.tape.backward(total)?;
            let mut w_grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut t_grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (key, var) in &exec.param_vars {
                let g = exec.tape.grad_or_zeros(*var);
                if is_arch_key(key) {
                    if !theta_frozen {
                        t_grads.insert(key.clone(), g);
                    }
                } else {
                    w_grads.insert(key.clone(), g);
                }
            }
            opt_w.step(sg, &w_grads);
            opt_theta.step(sg, &t_grads);
            exec::apply_bn_updates(&mut sg.graph, &exec.bn_stats)?;
            batches += 1;
        }

        let val_accuracy = evaluate(sg, &splits.val, cfg.batch_size)?;
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            cost: cost_sum / batches.max(1) as f64,
            val_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

fn count_correct(tape: &crate::tensor::Tape<f32>, logits: crate::tensor::Var, labels: &[usize]) -> usize {
    let shape = tape.shape(logits);
    let (n, c) = (shape[0], shape[1]);
    let data = tape.data(logits);
    let mut correct = 0;
    for i in 0..n {
        let row = &data[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct
}

/// Eval-mode classification accuracy on a split.
pub fn evaluate(sg: &Searchable<f32>, split: &data::Split, batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = split.batch(chunk);
        let exec = exec::execute(sg, &[x], ExecOpts::eval(), &mut rng)?;
        correct += count_correct(&exec.tape, exec.outputs[0], &labels);
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Plain training of an exported graph (lambda = 0), used for the short
/// fine-tune after export and for baselines.
pub fn finetune(
    g: Graph<f32>,
    splits: &data::Splits,
    cfg: &ExperimentConfig,
    epochs: usize,
    run_seed: u64,
) -> Result<(Graph<f32>, History)> {
    let mut sg = Searchable::plain(g);
    let history = train_loop(&mut sg, splits, cfg, 0.0, "finetune", run_seed, epochs)?;
    Ok((sg.graph, history))
}
