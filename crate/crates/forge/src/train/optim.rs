//! Minimal first-order optimizers with per-parameter slot state.

use crate::graph::exec::Searchable;
use crate::tensor::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub enum OptKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone)]
struct Slots<S> {
    a: Vec<S>,
    b: Vec<S>,
}

/// Optimizer over named parameters of a searchable graph. Slot shapes mirror
/// parameter shapes; Adam moments start at zero and use bias correction.
pub struct Optimizer<S: Scalar> {
    pub kind: OptKind,
    slots: BTreeMap<String, Slots<S>>,
    t: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptKind) -> Self {
        Optimizer { kind, slots: BTreeMap::new(), t: 0 }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptKind::Sgd { lr, momentum })
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }

    /// One update step. Keys missing from the graph are skipped silently so a
    /// caller can partition one gradient map across several optimizers.
    pub fn step(&mut self, sg: &mut Searchable<S>, grads: &BTreeMap<String, Vec<S>>) {
        self.t += 1;
        for (key, grad) in grads {
            let data = match sg.param_mut(key) {
                Some(t) => t.data_mut(),
                None => continue,
            };
            let slots = self.slots.entry(key.clone()).or_insert_with(|| Slots {
                a: vec![S::ZERO; grad.len()],
                b: vec![S::ZERO; grad.len()],
            });
            match self.kind {
                OptKind::Sgd { lr, momentum } => {
                    let lr = S::from_f64(lr);
                    let mom = S::from_f64(momentum);
                    for i in 0..grad.len() {
                        slots.a[i] = mom * slots.a[i] + grad[i];
                        data[i] -= lr * slots.a[i];
                    }
                }
                OptKind::Adam { lr, beta1, beta2, eps } => {
                    let b1 = S::from_f64(beta1);
                    let b2 = S::from_f64(beta2);
                    let eps = S::from_f64(eps);
                    let bc1 = S::from_f64(1.0 - beta1.powi(self.t as i32));
                    let bc2 = S::from_f64(1.0 - beta2.powi(self.t as i32));
                    let lr = S::from_f64(lr);
                    for i in 0..grad.len() {
                        slots.a[i] = b1 * slots.a[i] + (S::ONE - b1) * grad[i];
                        slots.b[i] = b2 * slots.b[i] + (S::ONE - b2) * grad[i] * grad[i];
                        let mhat = slots.a[i] / bc1;
                        let vhat = slots.b[i] / bc2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
