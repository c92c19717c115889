//! Tensors, the tape, and the surrogate-gradient primitives.
//!
//! ```console
//! cargo run --release --example autodiff_basics
//! ```

use forge::tensor::{check, ops, Tape, Tensor};

fn main() -> forge::Result<()> {
    // A tiny convolution with gradients.
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
    let y = ops::conv2d(&mut tape, x, w, None, (1, 1), (0, 0), 1)?;
    println!("conv(ones, ones) over a 3x3 window = {:?}", tape.data(y));

    let loss = ops::sum(&mut tape, y);
    tape.backward(loss)?;
    println!("d(sum)/dw = {:?}", tape.grad(w).unwrap());

    // Binarization with a straight-through backward: the step function has no
    // usable jacobian, so gradients pass through unchanged.
    let mut tape = Tape::<f32>::new();
    let theta = tape.leaf(Tensor::from_vec(vec![4], vec![0.9, 0.3, 0.5, -0.2])?);
    let gate = ops::heaviside_ste(&mut tape, theta, 0.5);
    println!("H([0.9, 0.3, 0.5, -0.2]) = {:?} (ties keep the channel)", tape.data(gate));
    let s = ops::sum(&mut tape, gate);
    tape.backward(s)?;
    println!("straight-through gradient = {:?}", tape.grad(theta).unwrap());

    // Gumbel-Softmax: sampled in training, deterministic tempered softmax when
    // the noise is omitted.
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf(Tensor::from_vec(vec![3], vec![2.0, 0.0, -1.0])?);
    let soft = ops::gumbel_softmax(&mut tape, logits, 1.0, None)?;
    println!("tempered softmax  = {:?}", tape.data(soft));
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let noise = ops::sample_gumbel::<f32>(&mut rng, 3);
    let sampled = ops::gumbel_softmax(&mut tape, logits, 1.0, Some(&noise))?;
    println!("one gumbel sample = {:?}", tape.data(sampled));

    // Fake quantization: weights on a symmetric min-max grid, activations
    // through a learned-clip quantizer.
    let mut tape = Tape::<f32>::new();
    let wv = tape.constant(Tensor::from_vec(vec![4], vec![0.5, -1.0, 0.24, 0.77])?);
    for bits in [2, 4, 8] {
        let q = ops::fake_quant_weight_minmax(&mut tape, wv, bits)?;
        println!("fake-quant {} bits: {:?}", bits, tape.data(q));
    }

    // Every differentiable primitive is checked against central finite
    // differences in f64; here is the harness on the linear layer.
    check::check_gradient(
        |t, v| {
            let y = ops::linear(t, v[0], v[1], Some(v[2])).unwrap();
            ops::sum(t, y)
        },
        &[
            check::rand_tensor(&[4, 6], -1.0, 1.0, 1),
            check::rand_tensor(&[3, 6], -1.0, 1.0, 2),
            check::rand_tensor(&[3], -1.0, 1.0, 3),
        ],
        4,
        1e-4,
        1e-4,
    )
    .expect("analytic gradient matches finite differences");
    println!("finite-difference check on linear: ok");
    Ok(())
}
