//! Differentiable mixed-precision search over a 2/4/8-bit menu.
//!
//! ```console
//! cargo run --release --example mixed_precision
//! ```

use forge::cost::{static_cost, CostSpec};
use forge::graph::exec::{MethodState, Searchable};
use forge::graph::init_weights;
use forge::mps;
use forge::passes::{self, ExportOpts};
use forge::train::{self, data, models, ExperimentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> forge::Result<()> {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "shapes16",
        "seed_graph": {"builtin": "shapes16-cnn"},
        "chain": ["mps"],
        "lambdas": [2e-5],
        "epochs": 10,
        "batch_size": 32,
        "seed": 11,
        "export_dir": "unused",
        "dataset_sizes": [800, 200, 200],
        "bitwidths": [2, 4, 8]
    }))
    .expect("literal config");

    let splits = data::generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
    let mut g = models::builtin_graph("shapes16-cnn")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_weights(&mut g, &mut rng);
    let float_bytes = static_cost(&Searchable::plain(g.clone()), &CostSpec::params_bytes())?;

    // Batch norm must be folded before attaching; `prepare` does both.
    let (mut sg, _) = train::prepare(g, "mps", &cfg)?;
    if let MethodState::Mps(state) = &sg.method {
        println!(
            "{} weight choices, {} shared activation choices over {:?} bits",
            state.weight_choices.len(),
            state.act_choices.len(),
            state.bitwidths
        );
    }
    let history = train::train_search(&mut sg, &splits, &cfg, cfg.lambdas[0], "mps", 1)?;
    println!(
        "search finished: val accuracy {:.3}, expected bytes {:.0}",
        history.epochs.last().unwrap().val_accuracy,
        history.epochs.last().unwrap().cost
    );

    // Freeze each tensor at its argmax precision.
    if let MethodState::Mps(state) = &sg.method {
        for (node, choice) in &state.weight_choices {
            let (bits, _) = mps::finalize(choice.theta.data(), &state.bitwidths);
            println!("  {:<6} weights -> {} bits (theta {:?})", node, bits, choice.theta.data());
        }
    }
    let (exported, report) = passes::export(&sg, ExportOpts::default())?;
    let mixed_bytes = static_cost(&Searchable::plain(exported), &CostSpec::params_bytes())?;
    println!("float {:.0} bytes -> mixed {:.0} bytes ({:.0}%)", float_bytes, mixed_bytes,
             100.0 * mixed_bytes / float_bytes);
    for p in report.precisions.iter().take(4) {
        println!("  {} -> {} bits (scale {:.4})", p.owner, p.bits, p.scale.unwrap_or(0.0));
    }
    Ok(())
}
