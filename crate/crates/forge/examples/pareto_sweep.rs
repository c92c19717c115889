//! Lambda sweep producing a Pareto front, CSV and SVG.
//!
//! ```console
//! cargo run --release --example pareto_sweep
//! ```
//!
//! This is the library-level equivalent of `forge sweep <config.json>`,
//! scaled down to run in about a minute.

use forge::train::{report, sweep, ExperimentConfig};

fn main() -> forge::Result<()> {
    let out = std::env::temp_dir().join("forge-example-sweep");
    let _ = std::fs::remove_dir_all(&out);
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "shapes16",
        "seed_graph": {"builtin": "shapes16-cnn"},
        "chain": ["pit"],
        "lambdas": [1e-3, 1e-5, 1e-7],
        "epochs": 6,
        "batch_size": 32,
        "finetune_epochs": 2,
        "seed": 42,
        "export_dir": out.display().to_string(),
        "dataset_sizes": [600, 150, 150]
    }))
    .expect("literal config");

    let records = sweep::sweep(&cfg)?;
    println!("{}", sweep::csv_header());
    for r in &records {
        println!(
            "{:e},{},{:.4},{},{},{},{}",
            r.lambda, r.chain, r.accuracy, r.params, r.params_bytes, r.macs, r.dominated
        );
    }
    let svg = out.join("pareto.svg");
    report::write_svg(&records, &svg)?;
    println!("artifacts in {}", out.display());
    println!("  pareto.csv, records.json, {}", svg.file_name().unwrap().to_string_lossy());
    Ok(())
}
