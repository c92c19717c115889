//! Mask-based channel search on a small CNN, from seed to pruned export.
//!
//! ```console
//! cargo run --release --example channel_search
//! ```

use forge::cost::{static_cost, CostSpec};
use forge::graph::exec::Searchable;
use forge::graph::init_weights;
use forge::passes::{self, ExportOpts};
use forge::train::{self, data, models, ExperimentConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> forge::Result<()> {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "task": "shapes16",
        "seed_graph": {"builtin": "shapes16-cnn"},
        "chain": ["pit"],
        "lambdas": [1e-4],
        "epochs": 14,
        "batch_size": 32,
        "finetune_epochs": 3,
        "seed": 42,
        "export_dir": "unused",
        "dataset_sizes": [800, 200, 200]
    }))
    .expect("literal config");

    let splits = data::generate_dataset(&cfg.task, cfg.seed, cfg.dataset_sizes)?;
    let mut seed = models::builtin_graph("shapes16-cnn")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_weights(&mut seed, &mut rng);
    let seed_params = static_cost(&Searchable::plain(seed.clone()), &CostSpec::params())?;

    // Conversion passes + mask attachment, then the joint search.
    let (mut sg, report) = train::prepare(seed, "pit", &cfg)?;
    println!("mask groups:");
    for g in &report.groups {
        println!("  {}: members {:?}, {} channels{}", g.id, g.members, g.channels,
                 if g.frozen { " (frozen)" } else { "" });
    }
    let history = train::train_search(&mut sg, &splits, &cfg, cfg.lambdas[0], "pit", 1)?;
    for e in history.epochs.iter().step_by(3) {
        println!(
            "epoch {:>2}  loss {:.3}  train acc {:.3}  effective params {:>6.0}  val acc {:.3}",
            e.epoch, e.loss, e.train_accuracy, e.cost, e.val_accuracy
        );
    }

    // Export physically removes the pruned channels.
    let (exported, ereport) = passes::export(&sg, ExportOpts::default())?;
    println!("pruned layers:");
    for p in &ereport.pruned {
        println!("  {:<6} kept {:>2} of {}", p.node, p.kept, p.total);
    }
    let final_params = static_cost(&Searchable::plain(exported.clone()), &CostSpec::params())?;
    let (tuned, _) = train::finetune(exported, &splits, &cfg, cfg.finetune_epochs, 2)?;
    let acc = train::evaluate(&Searchable::plain(tuned), &splits.test, cfg.batch_size)?;
    println!(
        "seed {} params -> exported {} params ({:.0}%), test accuracy {:.3}",
        seed_params,
        final_params,
        100.0 * final_params / seed_params,
        acc
    );
    Ok(())
}
