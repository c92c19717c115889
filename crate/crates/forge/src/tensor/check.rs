//! Gradient verification against central finite differences.
//!
//! Checks run in `f64` so the h=1e-4 stencil is trustworthy. The function
//! under test is rebuilt from scratch for every probe, which keeps the
//! comparison honest: the analytic path and the numeric path never share a
//! tape.

use super::{ops, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a single gradient comparison.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative agreement with a mixed absolute floor:
/// |a - b| <= tol * max(1, |a|, |b|).
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must be a deterministic function of its inputs (inject any randomness
/// through the input tensors). Vector outputs are reduced to a scalar through
/// a fixed random linear projection so the whole Jacobian is probed.
pub fn check_gradient<F>(
    f: F,
    inputs: &[Tensor<f64>],
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<(), GradMismatch>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Fixed projection weights, sized on a probe evaluation.
    let probe_len = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        tape.numel(y)
    };
    let proj: Vec<f64> = (0..probe_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |tensors: &[Tensor<f64>], record: bool| -> (f64, Option<(Tape<f64>, Vec<Var>)>) {
        let mut tape = if record { Tape::new() } else { Tape::no_grad() };
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&mut tape, &vars);
        let pt = tape.constant(
            Tensor::from_vec(tape.shape(y).to_vec(), proj.clone()).expect("projection shape"),
        );
        let prod = ops::mul(&mut tape, y, pt).expect("projection mul");
        let loss = ops::sum(&mut tape, prod);
        let v = tape.item(loss);
        if record {
            tape.backward(loss).expect("backward");
            (v, Some((tape, vars)))
        } else {
            (v, None)
        }
    };

    let (_, rec) = eval(inputs, true);
    let (tape, vars) = rec.expect("recording run");

    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(vars[ti]);
        for ei in 0..input.numel() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + h;
            let (up, _) = eval(&probe, false);
            probe[ti].data_mut()[ei] = orig - h;
            let (down, _) = eval(&probe, false);
            probe[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !close(analytic[ei], numeric, tol) {
                return Err(GradMismatch {
                    input: ti,
                    element: ei,
                    analytic: analytic[ei],
                    numeric,
                });
            }
        }
    }
    Ok(())
}

/// Uniform random tensor in [lo, hi), reproducible from the seed.
pub fn rand_tensor<S: Scalar>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}
