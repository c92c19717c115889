//! Static shape inference over a graph.

use super::{Graph, OpKind, Params};
use crate::error::{ForgeError, Result};
use crate::tensor::Scalar;
use std::collections::BTreeMap;

/// Infer the static output shape of every node for the given batch size.
///
/// Shapes include the batch axis: Input nodes produce `[N] + declared shape`.
/// Fails with the offending node and edge named when operand shapes are
/// inconsistent.
pub fn infer_shapes<S: Scalar>(g: &Graph<S>, batch: usize) -> Result<BTreeMap<String, Vec<usize>>> {
    let order = g.topo_order()?;
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for id in &order {
        let node = g.node(id)?;
        let in_shapes: Vec<Vec<usize>> = g
            .producers(id)
            .iter()
            .map(|(src, _)| shapes.get(src).cloned().expect("topological order"))
            .collect();
        let shape = match (&node.kind, &node.params) {
            (OpKind::Input, Params::Input { shape }) => {
                let mut s = vec![batch];
                s.extend(shape);
                s
            }
            (OpKind::Output | OpKind::Identity, _) => in_shapes[0].clone(),
            (OpKind::ReLU, _) | (OpKind::BatchNorm, _) => {
                if node.kind == OpKind::BatchNorm {
                    let c = match &node.params {
                        Params::BatchNorm(p) => p.num_features,
                        _ => unreachable!(),
                    };
                    if in_shapes[0].len() < 2 || in_shapes[0][1] != c {
                        return Err(ForgeError::shape(format!(
                            "node '{}': batch norm over {} features fed {:?}",
                            id, c, in_shapes[0]
                        )));
                    }
                }
                in_shapes[0].clone()
            }
            (OpKind::Conv2d, Params::Conv(p)) => {
                let s = &in_shapes[0];
                if s.len() != 4 {
                    return Err(ForgeError::shape(format!(
                        "node '{}': conv input {:?} must be 4-d",
                        id, s
                    )));
                }
                if s[1] != p.in_channels {
                    return Err(ForgeError::shape(format!(
                        "node '{}': expects {} input channels, got {:?}",
                        id, p.in_channels, s
                    )));
                }
                let (oh, ow) = conv_out(s[2], s[3], p.kernel, p.stride, p.padding)
                    .map_err(|e| ForgeError::shape(format!("node '{}': {}", id, e)))?;
                vec![s[0], p.out_channels, oh, ow]
            }
            (OpKind::DepthwiseConv2d, Params::DwConv(p)) => {
                let s = &in_shapes[0];
                if s.len() != 4 || s[1] != p.channels {
                    return Err(ForgeError::shape(format!(
                        "node '{}': depthwise conv over {} channels fed {:?}",
                        id, p.channels, s
                    )));
                }
                let (oh, ow) = conv_out(s[2], s[3], p.kernel, p.stride, p.padding)
                    .map_err(|e| ForgeError::shape(format!("node '{}': {}", id, e)))?;
                vec![s[0], p.channels, oh, ow]
            }
            (OpKind::Linear, Params::Linear(p)) => {
                let s = &in_shapes[0];
                if s.len() != 2 || s[1] != p.in_features {
                    return Err(ForgeError::shape(format!(
                        "node '{}': linear expects [N, {}], got {:?}",
                        id, p.in_features, s
                    )));
                }
                vec![s[0], p.out_features]
            }
            (OpKind::MaxPool | OpKind::AvgPool, Params::Pool(p)) => {
                let s = &in_shapes[0];
                if s.len() != 4 {
                    return Err(ForgeError::shape(format!(
                        "node '{}': pool input {:?} must be 4-d",
                        id, s
                    )));
                }
                let (oh, ow) = pool_out(s[2], s[3], p.kernel, p.stride)
                    .map_err(|e| ForgeError::shape(format!("node '{}': {}", id, e)))?;
                vec![s[0], s[1], oh, ow]
            }
            (OpKind::GlobalAvgPool, _) => {
                let s = &in_shapes[0];
                if s.len() != 4 {
                    return Err(ForgeError::shape(format!(
                        "node '{}': global pool input {:?} must be 4-d",
                        id, s
                    )));
                }
                vec![s[0], s[1]]
            }
            (OpKind::Flatten, _) => {
                let s = &in_shapes[0];
                vec![s[0], s[1..].iter().product()]
            }
            (OpKind::Add, _) => {
                for (i, s) in in_shapes.iter().enumerate().skip(1) {
                    if s != &in_shapes[0] {
                        return Err(ForgeError::shape(format!(
                            "node '{}': add operand {} has shape {:?}, operand 0 has {:?}",
                            id, i, s, in_shapes[0]
                        )));
                    }
                }
                in_shapes[0].clone()
            }
            (OpKind::Concat, Params::Concat { axis }) => {
                let first = &in_shapes[0];
                if *axis >= first.len() {
                    return Err(ForgeError::shape(format!(
                        "node '{}': concat axis {} out of range for {:?}",
                        id, axis, first
                    )));
                }
                let mut total = 0;
                for (i, s) in in_shapes.iter().enumerate() {
                    if s.len() != first.len()
                        || s.iter().zip(first).enumerate().any(|(d, (a, b))| d != *axis && a != b)
                    {
                        return Err(ForgeError::shape(format!(
                            "node '{}': concat operand {} shape {:?} incompatible with {:?}",
                            id, i, s, first
                        )));
                    }
                    total += s[*axis];
                }
                let mut out = first.clone();
                out[*axis] = total;
                out
            }
            (OpKind::SuperNetCombiner, Params::Combiner { .. }) => {
                for (i, s) in in_shapes.iter().enumerate().skip(1) {
                    if s != &in_shapes[0] {
                        return Err(ForgeError::shape(format!(
                            "supernet module '{}': branch {} output {:?} differs from branch 0 output {:?}",
                            id, i, s, in_shapes[0]
                        )));
                    }
                }
                in_shapes[0].clone()
            }
            (k, p) => {
                return Err(ForgeError::graph(format!(
                    "node '{}': cannot infer shape for kind {} with params {:?}",
                    id,
                    k.name(),
                    p
                )));
            }
        };
        shapes.insert(id.clone(), shape);
    }
    Ok(shapes)
}

fn conv_out(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> std::result::Result<(usize, usize), String> {
    if h + 2 * padding.0 < kernel.0 || w + 2 * padding.1 < kernel.1 {
        return Err(format!(
            "kernel {:?} larger than padded input {}x{}",
            kernel,
            h + 2 * padding.0,
            w + 2 * padding.1
        ));
    }
    Ok(((h + 2 * padding.0 - kernel.0) / stride.0 + 1, (w + 2 * padding.1 - kernel.1) / stride.1 + 1))
}

fn pool_out(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> std::result::Result<(usize, usize), String> {
    if h < kernel.0 || w < kernel.1 {
        return Err(format!("pool kernel {:?} larger than input {}x{}", kernel, h, w));
    }
    Ok(((h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1))
}
