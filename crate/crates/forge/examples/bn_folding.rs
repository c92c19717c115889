//! Folding batch norm into the preceding layer, and undoing it.
//!
//! ```console
//! cargo run --release --example bn_folding
//! ```

use forge::graph::exec::{execute, ExecOpts, Searchable};
use forge::graph::init_weights;
use forge::passes;
use forge::tensor::check::rand_tensor;
use forge::train::models;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> forge::Result<()> {
    let mut g = models::builtin_graph("shapes16-cnn-bn")?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    init_weights(&mut g, &mut rng);
    // Give the running statistics something non-trivial.
    for bn in ["bn1", "bn2", "bn3"] {
        let node = g.node_mut(bn)?;
        let c = node.weight("gamma")?.numel();
        node.weights.insert("gamma".into(), rand_tensor(&[c], 0.5, 1.5, 10));
        node.weights.insert("beta".into(), rand_tensor(&[c], -0.3, 0.3, 11));
        node.weights.insert("running_mean".into(), rand_tensor(&[c], -0.2, 0.2, 12));
        node.weights.insert("running_var".into(), rand_tensor(&[c], 0.5, 2.0, 13));
    }

    let (folded, folded_list, warnings) = passes::fold_bn(&g)?;
    println!("folded: {:?}", folded_list);
    println!("warnings: {:?}", warnings);
    println!("{} nodes before, {} after", g.nodes().len(), folded.nodes().len());

    let unfolded = passes::unfold_bn(&folded)?;

    let x = rand_tensor::<f32>(&[2, 1, 16, 16], 0.0, 1.0, 14);
    let eval = |graph: &forge::graph::Graph<f32>| -> Vec<f32> {
        let sg = Searchable::plain(graph.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run = execute(&sg, &[x.clone()], ExecOpts::eval(), &mut rng).unwrap();
        run.tape.data(run.outputs[0]).to_vec()
    };
    let orig = eval(&g);
    let fold = eval(&folded);
    let back = eval(&unfolded);
    let max_fold = orig.iter().zip(&fold).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    let max_back = orig.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max |original - folded|   = {:.2e}", max_fold);
    println!("max |original - unfolded| = {:.2e}", max_back);
    Ok(())
}
