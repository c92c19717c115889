//! Path-based search: pick one branch per choice point by gradient descent.
//!
//! ```console
//! cargo run --release --example supernet_search
//! ```

use forge::cost::{static_cost, CostSpec};
use forge::graph::exec::{MethodState, Searchable};
use forge::graph::init_weights;
use forge::passes::{self, ExportOpts};
use forge::supernet;
use forge::train::{self, data, models, ExperimentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> forge::Result<()> {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "shapes16",
        "seed_graph": {"builtin": "shapes16-supernet"},
        "chain": ["supernet"],
        "lambdas": [2e-4],
        "epochs": 10,
        "batch_size": 32,
        "tau_start": 1.0,
        "tau_end": 0.2,
        "seed": 7,
        "export_dir": "unused",
        "dataset_sizes": [800, 200, 200]
    }))
    .expect("literal config");

    let splits = data::generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
    let mut g = models::builtin_graph("shapes16-supernet")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_weights(&mut g, &mut rng);

    let (mut sg, _) = train::prepare(g, "supernet", &cfg)?;
    let history = train::train_search(&mut sg, &splits, &cfg, cfg.lambdas[0], "supernet", 1)?;
    println!(
        "search finished: loss {:.3}, val accuracy {:.3}",
        history.epochs.last().unwrap().loss,
        history.epochs.last().unwrap().val_accuracy
    );

    // Branch logits after training, and the winner per module.
    if let MethodState::Supernet(state) = &sg.method {
        for comb in &state.combiners {
            let theta = sg.graph.node(comb)?.weight("theta")?;
            let pick = supernet::select(theta.data());
            println!("{}: theta {:?} -> branch {}", comb, theta.data(), pick);
        }
    }

    let (exported, report) = passes::export(&sg, ExportOpts::default())?;
    println!("selected branches: {:?}", report.selected_branches);
    println!(
        "exported graph: {} nodes, {} params",
        exported.nodes().len(),
        static_cost(&Searchable::plain(exported), &CostSpec::params())?
    );
    Ok(())
}
