//! Mask-based channel search (structured pruning with trainable gates).
//!
//! Each mask group carries a logit vector theta, one entry per output
//! channel, binarized by a Heaviside step at 0.5 on every forward pass:
//! `W_masked = W (.) H(theta)` broadcast over the non-channel axes. Ties at
//! the threshold keep the channel, gradients reach theta through the identity
//! straight-through estimator, and the bias is masked with the same gate so
//! dropped channels are exactly zero end to end.

use crate::error::{ForgeError, Result};
use crate::graph::exec::MethodState;
use crate::graph::{Graph, OpKind};
use crate::passes::MaskGroup;
use crate::tensor::{ops, Scalar, Tape, Tensor, Var};
use std::collections::BTreeMap;

/// Trainable channel mask for one group.
#[derive(Debug, Clone)]
pub struct ChannelMask<S: Scalar> {
    pub theta: Tensor<S>,
}

/// Search state for an attached channel search.
#[derive(Debug, Clone)]
pub struct PitState<S: Scalar> {
    /// Trainable masks by group id. Frozen groups have no entry and keep
    /// every channel.
    pub masks: BTreeMap<String, ChannelMask<S>>,
    pub groups: Vec<MaskGroup>,
    /// Binarization threshold for H(theta).
    pub threshold: f64,
}

pub const THRESHOLD: f64 = 0.5;
pub const THETA_INIT: f64 = 1.0;

/// Attach channel masks to a prepared graph (targets identified, groups
/// shared, batch norm folded, calculators attached). One mask per non-frozen
/// group, theta initialized to 1.0 so the search starts from the full seed.
pub fn attach<S: Scalar>(g: &Graph<S>, groups: &[MaskGroup]) -> Result<PitState<S>> {
    if g.nodes().iter().any(|n| n.ann.quant.is_some()) {
        return Err(ForgeError::config(
            "pit: graph carries frozen quantizers; methods compose by export, not stacking"
                .to_string(),
        ));
    }
    if g.nodes().iter().any(|n| n.kind == OpKind::SuperNetCombiner) {
        return Err(ForgeError::config(
            "pit: graph still contains supernet modules; export the supernet first".to_string(),
        ));
    }
    if groups.is_empty() {
        return Err(ForgeError::config("pit: no mask groups to search".to_string()));
    }
    for group in groups {
        if group.members.is_empty() {
            return Err(ForgeError::config(format!("pit: group '{}' has no members", group.id)));
        }
        for m in &group.members {
            let ann = &g.node(m)?.ann;
            if ann.mask_group.as_deref() != Some(group.id.as_str()) {
                return Err(ForgeError::config(format!(
                    "pit: node '{}' is not annotated with group '{}'; run the calculator pass first",
                    m, group.id
                )));
            }
        }
    }
    let mut masks = BTreeMap::new();
    for group in groups.iter().filter(|g| !g.frozen) {
        masks.insert(
            group.id.clone(),
            ChannelMask { theta: Tensor::full(&[group.channels], S::from_f64(THETA_INIT)) },
        );
    }
    Ok(PitState { masks, groups: groups.to_vec(), threshold: THRESHOLD })
}

impl<S: Scalar> PitState<S> {
    pub fn into_method(self) -> MethodState<S> {
        MethodState::Pit(self)
    }
}

/// Mask a weight tensor's leading (output-channel) axis with H(theta).
/// Returns the masked weight and the binarized mask for reuse on the bias.
pub fn masked_weight<S: Scalar>(
    tape: &mut Tape<S>,
    w: Var,
    theta: Var,
    threshold: f64,
) -> Result<(Var, Var)> {
    if tape.shape(w)[0] != tape.numel(theta) {
        return Err(ForgeError::shape(format!(
            "masked_weight: {} channels vs {} mask entries",
            tape.shape(w)[0],
            tape.numel(theta)
        )));
    }
    let h = ops::heaviside_ste(tape, theta, threshold);
    let masked = ops::scale_channels(tape, w, h)?;
    Ok((masked, h))
}

/// Differentiable surviving-channel count: `sum_c H(theta_c)`. Integral in
/// the forward pass, gradient of one into every logit through the STE.
pub fn effective_channel_count<S: Scalar>(tape: &mut Tape<S>, theta: Var, threshold: f64) -> Var {
    let h = ops::heaviside_ste(tape, theta, threshold);
    ops::sum(tape, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::rand_tensor;

    #[test]
    fn all_ones_theta_keeps_weight_unchanged() {
        let mut t = Tape::<f32>::new();
        let w = t.constant(rand_tensor(&[4, 2, 3, 3], -1.0, 1.0, 3));
        let theta = t.constant(Tensor::ones(&[4]));
        let (masked, _) = masked_weight(&mut t, w, theta, THRESHOLD).unwrap();
        assert_eq!(t.data(masked), t.data(w));
    }

    #[test]
    fn sub_threshold_channel_zeroes_exactly() {
        let mut t = Tape::<f32>::new();
        let w = t.constant(rand_tensor(&[3, 2], -1.0, 1.0, 5));
        let theta = t.constant(Tensor::from_vec(vec![3], vec![1.0, 0.1, 1.0]).unwrap());
        let (masked, _) = masked_weight(&mut t, w, theta, THRESHOLD).unwrap();
        assert_eq!(&t.data(masked)[2..4], &[0.0, 0.0]);
        assert_eq!(&t.data(masked)[0..2], &t.data(w)[0..2]);
    }

    #[test]
    fn theta_gradient_flows_to_kept_and_dropped_channels() {
        // Two channels, one kept, one dropped: the task gradient reaches both
        // logits through the identity STE.
        let mut t = Tape::<f64>::new();
        let w = t.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let theta = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        let (masked, _) = masked_weight(&mut t, w, theta, THRESHOLD).unwrap();
        let loss = ops::sum(&mut t, masked);
        t.backward(loss).unwrap();
        let g = t.grad(theta).unwrap();
        // d loss / d theta_c = sum of channel c's weights (via scale_channels),
        // regardless of whether the channel is currently dropped.
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] - 7.0).abs() < 1e-12);
        // Weight gradient is the binary mask broadcast.
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn effective_count_values_and_gradient() {
        let mut t = Tape::<f64>::new();
        // 32 channels, 20 below threshold -> 12.
        let mut vals = vec![1.0; 32];
        for v in vals.iter_mut().take(20) {
            *v = 0.2;
        }
        let theta = t.leaf(Tensor::from_vec(vec![32], vals).unwrap());
        let count = effective_channel_count(&mut t, theta, THRESHOLD);
        assert_eq!(t.item(count), 12.0);
        t.backward(count).unwrap();
        assert!(t.grad(theta).unwrap().iter().all(|g| *g == 1.0));

        // All kept -> C.
        let mut t = Tape::<f64>::new();
        let theta = t.constant(Tensor::ones(&[7]));
        let count = effective_channel_count(&mut t, theta, THRESHOLD);
        assert_eq!(t.item(count), 7.0);
    }
}
