//! Declaring a network as a JSON graph, shape inference, and execution.
//!
//! ```console
//! cargo run --release --example graph_basics
//! ```

use forge::graph::exec::{execute, ExecOpts, Searchable};
use forge::graph::{init_weights, schema, shapes};
use forge::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DESCRIPTION: &str = r#"{
  "inputs": ["in"],
  "nodes": [
    {"id": "in",   "kind": "Input",   "params": {"shape": [1, 16, 16]}},
    {"id": "conv", "kind": "Conv2d",  "params": {"in_channels": 1, "out_channels": 8, "kernel": [3,3], "padding": [1,1]}},
    {"id": "bn",   "kind": "BatchNorm", "params": {"num_features": 8}},
    {"id": "relu", "kind": "ReLU"},
    {"id": "pool", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "flat", "kind": "Flatten"},
    {"id": "fc",   "kind": "Linear",  "params": {"in_features": 512, "out_features": 3}},
    {"id": "out",  "kind": "Output"}
  ],
  "edges": [
    ["in","conv",0], ["conv","bn",0], ["bn","relu",0], ["relu","pool",0],
    ["pool","flat",0], ["flat","fc",0], ["fc","out",0]
  ],
  "outputs": ["out"]
}"#;

fn main() -> forge::Result<()> {
    let mut graph = schema::parse_graph::<f32>(DESCRIPTION)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_weights(&mut graph, &mut rng);

    println!("inferred shapes (batch of 4):");
    for (id, shape) in shapes::infer_shapes(&graph, 4)? {
        println!("  {:<6} {:?}", id, shape);
    }

    let sg = Searchable::plain(graph);
    let x = Tensor::full(&[4, 1, 16, 16], 0.5);
    let run = execute(&sg, &[x], ExecOpts::eval(), &mut rng)?;
    println!("logits: {:?}", run.tape.data(run.outputs[0]));

    // Graphs round-trip through the same JSON schema they are written in.
    let json = schema::graph_to_json(&sg.graph)?;
    println!("serialized graph is {} bytes of JSON", json.len());
    Ok(())
}
