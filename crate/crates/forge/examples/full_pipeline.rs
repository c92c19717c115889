//! Sequential composition: supernet -> channel search -> mixed precision.
//!
//! Each stage trains, exports a plain graph, and hands it to the next stage's
//! auto-conversion. The stage report mirrors a seed-vs-stages summary table.
//!
//! ```console
//! cargo run --release --example full_pipeline
//! ```

use forge::train::{data, pipeline, ExperimentConfig};

fn main() -> forge::Result<()> {
    let out = std::env::temp_dir().join("forge-example-pipeline");
    let _ = std::fs::remove_dir_all(&out);
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "shapes16",
        "seed_graph": {"builtin": "shapes16-supernet"},
        "chain": ["supernet", "pit", "mps"],
        "lambdas": [2e-5],
        "epochs": 10,
        "batch_size": 32,
        "finetune_epochs": 3,
        "seed": 42,
        "export_dir": out.display().to_string(),
        "dataset_sizes": [800, 200, 200]
    }))
    .expect("literal config");

    let splits = data::generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
    let result = pipeline::run_chain(&cfg, cfg.lambdas[0], &splits, &out)?;

    println!("{:<10} {:>10} {:>12} {:>10} {:>9}", "stage", "params", "bytes", "macs", "accuracy");
    for s in &result.stages {
        println!(
            "{:<10} {:>10} {:>12} {:>10} {:>9.4}",
            s.stage, s.params, s.params_bytes, s.macs, s.accuracy
        );
    }
    println!(
        "{:<10} {:>10} {:>12} {:>10} {:>9.4}  (after fine-tune)",
        "final", result.final_params, result.final_params_bytes, result.final_macs,
        result.final_accuracy
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
