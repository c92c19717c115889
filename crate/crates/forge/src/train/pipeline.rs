//! Sequential composition of search methods: each stage searches, exports,
//! and hands a plain graph to the next stage's auto-conversion. Weights carry
//! over between stages.

use super::data::Splits;
use super::{evaluate, finetune, prepare, train_search, ExperimentConfig};
use crate::cost::{static_cost, CostSpec};
use crate::error::{ForgeError, Result};
use crate::graph::exec::Searchable;
use crate::graph::{init_weights, schema, Graph};
use crate::passes::{self, ExportOpts};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

const STAGE_ORDER: [&str; 3] = ["supernet", "pit", "mps"];

/// A chain must be a non-empty subsequence of [supernet, pit, mps]: the
/// precision search converts exported (already-searched) graphs, so nothing
/// may follow mps, and the coarse search cannot run on a pruned export.
pub fn validate_chain(chain: &[String]) -> Result<()> {
    if chain.is_empty() {
        return Err(ForgeError::config("empty method chain".to_string()));
    }
    let mut cursor = 0usize;
    let mut prev = "";
    for stage in chain {
        let pos = STAGE_ORDER.iter().position(|s| s == stage).ok_or_else(|| {
            ForgeError::config(format!("unknown stage '{}' in chain", stage))
        })?;
        if pos < cursor {
            return Err(ForgeError::config(format!(
                "chain order violation: '{}' cannot follow '{}' (mps must come last, supernet first)",
                stage, prev
            )));
        }
        cursor = pos + 1;
        prev = stage;
    }
    Ok(())
}

/// Sizes and accuracy of one finished stage, mirroring a per-stage result row.
#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub lambda: f64,
    pub accuracy: f64,
    pub params: f64,
    pub params_bytes: f64,
    pub macs: f64,
    pub export_path: String,
}

#[derive(Debug, Serialize)]
pub struct ChainResult {
    pub lambda: f64,
    pub stages: Vec<StageOutcome>,
    /// Final accuracy on the test split after the post-export fine-tune.
    pub final_accuracy: f64,
    /// Eval accuracy of the exported graph immediately after the last export,
    /// before any fine-tuning.
    pub export_accuracy: f64,
    /// Eval accuracy of the search graph at the end of the last stage.
    pub search_accuracy: f64,
    pub final_params: f64,
    pub final_params_bytes: f64,
    pub final_macs: f64,
    pub export_path: String,
}

pub fn measure_static(g: &Graph<f32>) -> Result<(f64, f64, f64)> {
    let sg = Searchable::plain(g.clone());
    Ok((
        static_cost(&sg, &CostSpec::params())?,
        static_cost(&sg, &CostSpec::params_bytes())?,
        static_cost(&sg, &CostSpec::macs())?,
    ))
}

/// Run a full method chain at one lambda. Artifacts land under `out_dir`:
/// `stage<i>-<name>/{search,exported}/` plus `final/` with the fine-tuned
/// graph.
pub fn run_chain(
    cfg: &ExperimentConfig,
    lambda: f64,
    splits: &Splits,
    out_dir: &Path,
) -> Result<ChainResult> {
    validate_chain(&cfg.chain)?;
    std::fs::create_dir_all(out_dir)?;
    let mut g = cfg.load_seed()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_weights(&mut g, &mut rng);

    let mut stages = Vec::new();
    let mut search_accuracy = 0.0;
    let mut export_accuracy = 0.0;
    for (si, stage) in cfg.chain.iter().enumerate() {
        let (mut sg, pass_report) = prepare(g, stage, cfg)?;
        let run_seed = cfg.seed.wrapping_add(si as u64 + 1);
        let history = train_search(&mut sg, splits, cfg, lambda, stage, run_seed)?;
        search_accuracy = evaluate(&sg, &splits.test, cfg.batch_size)?;

        let stage_dir = out_dir.join(format!("stage{}-{}", si, stage));
        let exclude = cfg.exclude.get(stage.as_str()).cloned().unwrap_or_default();
        super::state::save_search_state(&sg, &exclude, &cfg.bitwidths, &stage_dir.join("search"))?;
        std::fs::write(
            stage_dir.join("history.json"),
            serde_json::to_string_pretty(&history)?,
        )?;
        std::fs::write(
            stage_dir.join("passes.json"),
            serde_json::to_string_pretty(&pass_report)?,
        )?;

        let (exported, report) = passes::export(&sg, ExportOpts::default())?;
        let export_dir = stage_dir.join("exported");
        schema::save_graph_dir(&exported, &export_dir)?;
        std::fs::write(
            export_dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;

        let plain = Searchable::plain(exported);
        export_accuracy = evaluate(&plain, &splits.test, cfg.batch_size)?;
        let (params, bytes, macs) = measure_static(&plain.graph)?;
        stages.push(StageOutcome {
            stage: stage.clone(),
            lambda,
            accuracy: export_accuracy,
            params,
            params_bytes: bytes,
            macs,
            export_path: export_dir.display().to_string(),
        });
        g = plain.graph;
    }

    let ft_seed = cfg.seed.wrapping_add(0x5eed);
    let (final_graph, _) = finetune(g, splits, cfg, cfg.finetune_epochs, ft_seed)?;
    let final_dir = out_dir.join("final");
    schema::save_graph_dir(&final_graph, &final_dir)?;
    let plain = Searchable::plain(final_graph);
    let final_accuracy = evaluate(&plain, &splits.test, cfg.batch_size)?;
    let (params, bytes, macs) = measure_static(&plain.graph)?;

    let result = ChainResult {
        lambda,
        stages,
        final_accuracy,
        export_accuracy,
        search_accuracy,
        final_params: params,
        final_params_bytes: bytes,
        final_macs: macs,
        export_path: final_dir.display().to_string(),
    };
    std::fs::write(out_dir.join("stages.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn chain_validation() {
        assert!(validate_chain(&chain(&["pit"])).is_ok());
        assert!(validate_chain(&chain(&["mps"])).is_ok());
        assert!(validate_chain(&chain(&["supernet", "pit", "mps"])).is_ok());
        assert!(validate_chain(&chain(&["supernet", "mps"])).is_ok());
        assert!(validate_chain(&chain(&[])).is_err());
        assert!(validate_chain(&chain(&["mps", "pit"])).is_err());
        assert!(validate_chain(&chain(&["pit", "supernet"])).is_err());
        assert!(validate_chain(&chain(&["pit", "pit"])).is_err());
        assert!(validate_chain(&chain(&["nas"])).is_err());
    }
}
