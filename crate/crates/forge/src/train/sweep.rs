//! Lambda sweeps: one independent search per lambda, non-dominated flagging,
//! CSV output. Runs share nothing and execute in parallel.

use super::data::{generate_dataset, Splits};
use super::pipeline::run_chain;
use super::ExperimentConfig;
use crate::error::{ForgeError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One sweep row: a finished search at one lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoRecord {
    pub lambda: f64,
    pub chain: String,
    /// Test accuracy in [0,1] after export and fine-tune.
    pub accuracy: f64,
    pub params: f64,
    pub params_bytes: f64,
    pub macs: f64,
    pub dominated: bool,
    pub export_path: String,
    pub seconds: f64,
}

/// Mark records dominated on (accuracy, params_bytes): another record at
/// least as accurate and at least as small, strictly better in one.
pub fn flag_dominated(records: &mut [ParetoRecord]) {
    let snapshot: Vec<(f64, f64)> =
        records.iter().map(|r| (r.accuracy, r.params_bytes)).collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.dominated = snapshot.iter().enumerate().any(|(j, &(acc, bytes))| {
            j != i
                && acc >= r.accuracy
                && bytes <= r.params_bytes
                && (acc > r.accuracy || bytes < r.params_bytes)
        });
    }
}

pub fn csv_header() -> &'static str {
    "lambda,chain,accuracy,params,params_bytes,macs,dominated,export_path,seconds"
}

pub fn to_csv(records: &[ParetoRecord]) -> String {
    let mut out = String::from(csv_header());
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{:e},{},{:.6},{},{},{},{},{},{:.3}\n",
            r.lambda,
            r.chain,
            r.accuracy,
            r.params,
            r.params_bytes,
            r.macs,
            r.dominated,
            r.export_path,
            r.seconds
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct SweepFailure {
    lambda: f64,
    error: String,
}

/// Run the config's lambda grid, one independent search per lambda (in
/// parallel), and write `records.json` + `pareto.csv` under the export
/// directory. A failed lambda run is recorded in `failures.json` and the
/// sweep continues.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<ParetoRecord>> {
    let splits = generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
    let out_root = Path::new(&cfg.export_dir);
    std::fs::create_dir_all(out_root)?;

    let outcomes: Vec<(f64, Result<ParetoRecord>)> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda| (lambda, run_lambda(cfg, lambda, &splits)))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (lambda, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(SweepFailure { lambda, error: e.to_string() }),
        }
    }
    flag_dominated(&mut records);

    std::fs::write(out_root.join("records.json"), serde_json::to_string_pretty(&records)?)?;
    std::fs::write(out_root.join("pareto.csv"), to_csv(&records))?;
    if !failures.is_empty() {
        std::fs::write(out_root.join("failures.json"), serde_json::to_string_pretty(&failures)?)?;
    }
    if records.is_empty() {
        return Err(ForgeError::runtime(format!(
            "every lambda run failed; first error: {}",
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }
    Ok(records)
}

pub fn run_lambda(cfg: &ExperimentConfig, lambda: f64, splits: &Splits) -> Result<ParetoRecord> {
    let t0 = std::time::Instant::now();
    let rel = format!("lambda-{:e}", lambda);
    let dir = Path::new(&cfg.export_dir).join(&rel);
    let result = run_chain(cfg, lambda, splits, &dir)?;
    Ok(ParetoRecord {
        lambda,
        chain: cfg.chain.join("+"),
        accuracy: result.final_accuracy,
        params: result.final_params,
        params_bytes: result.final_params_bytes,
        macs: result.final_macs,
        dominated: false,
        // Relative to the sweep output root, so sweep directories are
        // relocatable and reruns compare byte-for-byte.
        export_path: format!("{}/final", rel),
        seconds: if cfg.record_seconds { t0.elapsed().as_secs_f64() } else { 0.0 },
    })
}
