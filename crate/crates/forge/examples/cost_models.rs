//! Built-in and user-defined cost specifications, and combining them into a
//! training loss.
//!
//! ```console
//! cargo run --release --example cost_models
//! ```

use forge::cost::{combine_costs, get_cost, static_cost, CostFnRegistry, CostSpec, CostTerm};
use forge::graph::exec::Searchable;
use forge::graph::init_weights;
use forge::tensor::{Tape, Tensor};
use forge::train::models;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn main() -> forge::Result<()> {
    let mut g = models::builtin_graph("shapes16-cnn")?;
    init_weights(&mut g, &mut ChaCha8Rng::seed_from_u64(5));
    let sg = Searchable::plain(g);

    // The three built-ins.
    for spec in [CostSpec::params(), CostSpec::params_bytes(), CostSpec::macs()] {
        println!("{:<12} = {}", spec.name, static_cost(&sg, &spec)?);
    }

    // A cost spec from its JSON file format: only convolutions count, and a
    // catch-all zero rule satisfies the error default for everything else.
    let conv_only = CostSpec::from_json(
        r#"{
          "name": "conv_params",
          "default": "error",
          "rules": [
            {"match": {"kind": "Conv2d"}, "cost": "params"},
            {"match": {}, "cost": "zero"}
          ]
        }"#,
    )?;
    println!("{:<12} = {}", conv_only.name, static_cost(&sg, &conv_only)?);

    // Arbitrary cost functions plug in through the registry; rules pass them
    // JSON args. Here: a toy read-bandwidth model, bytes per inference.
    let mut registry = CostFnRegistry::<f32>::builtin();
    registry.register("weight_traffic", |ctx, bag, args| {
        let reads = args.get("reads_per_inference").and_then(|v| v.as_f64()).unwrap_or(1.0);
        let out = bag.get("out_channels")?;
        let inp = bag.get("in_channels_per_group")?;
        let kh = bag.get("kernel_h")?;
        let kw = bag.get("kernel_w")?;
        let k = ctx.mul(kh, kw)?;
        let w = ctx.mul(out, inp)?;
        let w = ctx.mul(w, k)?;
        let bytes = ctx.scale(w, 4.0 * reads);
        Ok(bytes)
    });
    let traffic = CostSpec::from_json(
        r#"{
          "name": "traffic",
          "default": "zero",
          "rules": [{"match": {"kind": "Conv2d"}, "cost": "weight_traffic",
                     "args": {"reads_per_inference": 2.0}}]
        }"#,
    )?;
    let mut tape = Tape::no_grad();
    let v = get_cost(&mut tape, &BTreeMap::new(), &sg, &traffic, &registry)?;
    println!("{:<12} = {}", traffic.name, tape.item(v));

    // Combining: loss + lambda1 * size + lambda2 * max(0, macs - budget).
    let mut tape = Tape::<f32>::new();
    let task_loss = tape.constant(Tensor::scalar(0.8));
    let size = get_cost(&mut tape, &BTreeMap::new(), &sg, &CostSpec::params(), &registry)?;
    let macs = get_cost(&mut tape, &BTreeMap::new(), &sg, &CostSpec::macs(), &registry)?;
    let total = combine_costs(
        &mut tape,
        task_loss,
        &[("params".into(), size), ("macs".into(), macs)],
        &[
            CostTerm { cost: "params".into(), weight: 1e-4, hinge_budget: None },
            CostTerm { cost: "macs".into(), weight: 1e-6, hinge_budget: Some(2.0e5) },
        ],
    )?;
    println!(
        "task 0.8 + 1e-4*params + 1e-6*max(0, macs - 2e5) = {:.4}",
        tape.item(total)
    );
    Ok(())
}
