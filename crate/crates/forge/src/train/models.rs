//! Built-in seed networks for the desk-scale tasks.

use crate::error::{ForgeError, Result};
use crate::graph::{schema, Graph};

/// 3-block CNN for 16x16 single-channel inputs: (Conv3x3 -> ReLU -> MaxPool2)
/// x3 with 8/16/32 channels, then Flatten -> Linear(128 -> 3).
const SHAPES16_CNN: &str = r#"{
  "inputs": ["in"],
  "nodes": [
    {"id": "in",    "kind": "Input",   "params": {"shape": [1, 16, 16]}},
    {"id": "conv1", "kind": "Conv2d",  "params": {"in_channels": 1,  "out_channels": 8,  "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu1", "kind": "ReLU"},
    {"id": "pool1", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "conv2", "kind": "Conv2d",  "params": {"in_channels": 8,  "out_channels": 16, "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu2", "kind": "ReLU"},
    {"id": "pool2", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "conv3", "kind": "Conv2d",  "params": {"in_channels": 16, "out_channels": 32, "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu3", "kind": "ReLU"},
    {"id": "pool3", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "flat",  "kind": "Flatten"},
    {"id": "fc",    "kind": "Linear",  "params": {"in_features": 128, "out_features": 3}},
    {"id": "out",   "kind": "Output"}
  ],
  "edges": [
    ["in","conv1",0], ["conv1","relu1",0], ["relu1","pool1",0],
    ["pool1","conv2",0], ["conv2","relu2",0], ["relu2","pool2",0],
    ["pool2","conv3",0], ["conv3","relu3",0], ["relu3","pool3",0],
    ["pool3","flat",0], ["flat","fc",0], ["fc","out",0]
  ],
  "outputs": ["out"]
}"#;

/// Same skeleton with BatchNorm between each conv and its ReLU.
const SHAPES16_CNN_BN: &str = r#"{
  "inputs": ["in"],
  "nodes": [
    {"id": "in",    "kind": "Input",     "params": {"shape": [1, 16, 16]}},
    {"id": "conv1", "kind": "Conv2d",    "params": {"in_channels": 1,  "out_channels": 8,  "kernel": [3,3], "padding": [1,1]}},
    {"id": "bn1",   "kind": "BatchNorm", "params": {"num_features": 8}},
    {"id": "relu1", "kind": "ReLU"},
    {"id": "pool1", "kind": "MaxPool",   "params": {"kernel": [2,2]}},
    {"id": "conv2", "kind": "Conv2d",    "params": {"in_channels": 8,  "out_channels": 16, "kernel": [3,3], "padding": [1,1]}},
    {"id": "bn2",   "kind": "BatchNorm", "params": {"num_features": 16}},
    {"id": "relu2", "kind": "ReLU"},
    {"id": "pool2", "kind": "MaxPool",   "params": {"kernel": [2,2]}},
    {"id": "conv3", "kind": "Conv2d",    "params": {"in_channels": 16, "out_channels": 32, "kernel": [3,3], "padding": [1,1]}},
    {"id": "bn3",   "kind": "BatchNorm", "params": {"num_features": 32}},
    {"id": "relu3", "kind": "ReLU"},
    {"id": "pool3", "kind": "MaxPool",   "params": {"kernel": [2,2]}},
    {"id": "flat",  "kind": "Flatten"},
    {"id": "fc",    "kind": "Linear",    "params": {"in_features": 128, "out_features": 3}},
    {"id": "out",   "kind": "Output"}
  ],
  "edges": [
    ["in","conv1",0], ["conv1","bn1",0], ["bn1","relu1",0], ["relu1","pool1",0],
    ["pool1","conv2",0], ["conv2","bn2",0], ["bn2","relu2",0], ["relu2","pool2",0],
    ["pool2","conv3",0], ["conv3","bn3",0], ["bn3","relu3",0], ["relu3","pool3",0],
    ["pool3","flat",0], ["flat","fc",0], ["fc","out",0]
  ],
  "outputs": ["out"]
}"#;

/// Reference instantiation of the supernet skeleton below: the 3x3-conv
/// branch at every choice point. Used as the plain-model baseline when
/// accounting for what a supernet pipeline saves.
const SHAPES16_CNN_REF: &str = r#"{
  "inputs": ["in"],
  "nodes": [
    {"id": "in",    "kind": "Input",   "params": {"shape": [1, 16, 16]}},
    {"id": "conv1", "kind": "Conv2d",  "params": {"in_channels": 1,  "out_channels": 8,  "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu1", "kind": "ReLU"},
    {"id": "pool1", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "conv2", "kind": "Conv2d",  "params": {"in_channels": 8,  "out_channels": 16, "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu2", "kind": "ReLU"},
    {"id": "pool2", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "conv3", "kind": "Conv2d",  "params": {"in_channels": 16, "out_channels": 16, "kernel": [3,3], "padding": [1,1]}},
    {"id": "relu3", "kind": "ReLU"},
    {"id": "pool3", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "flat",  "kind": "Flatten"},
    {"id": "fc",    "kind": "Linear",  "params": {"in_features": 64, "out_features": 3}},
    {"id": "out",   "kind": "Output"}
  ],
  "edges": [
    ["in","conv1",0], ["conv1","relu1",0], ["relu1","pool1",0],
    ["pool1","conv2",0], ["conv2","relu2",0], ["relu2","pool2",0],
    ["pool2","conv3",0], ["conv3","relu3",0], ["relu3","pool3",0],
    ["pool3","flat",0], ["flat","fc",0], ["fc","out",0]
  ],
  "outputs": ["out"]
}"#;

/// Supernet variant: each block's conv becomes a branch menu of {3x3 conv,
/// 5x5 conv, depthwise-separable}, and the last block (16 -> 16 channels)
/// also offers an identity branch to skip the layer.
const SHAPES16_SUPERNET: &str = r#"{
  "inputs": ["in"],
  "nodes": [
    {"id": "in",    "kind": "Input",   "params": {"shape": [1, 16, 16]}},
    {"id": "sn1",   "kind": "SuperNetCombiner", "supernet_branches": [
      [{"id": "c3", "kind": "Conv2d", "params": {"in_channels": 1, "out_channels": 8, "kernel": [3,3], "padding": [1,1]}}],
      [{"id": "c5", "kind": "Conv2d", "params": {"in_channels": 1, "out_channels": 8, "kernel": [5,5], "padding": [2,2]}}],
      [{"id": "dw", "kind": "DepthwiseConv2d", "params": {"channels": 1, "kernel": [3,3], "padding": [1,1]}},
       {"id": "pw", "kind": "Conv2d", "params": {"in_channels": 1, "out_channels": 8, "kernel": [1,1]}}]
    ]},
    {"id": "relu1", "kind": "ReLU"},
    {"id": "pool1", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "sn2",   "kind": "SuperNetCombiner", "supernet_branches": [
      [{"id": "c3", "kind": "Conv2d", "params": {"in_channels": 8, "out_channels": 16, "kernel": [3,3], "padding": [1,1]}}],
      [{"id": "c5", "kind": "Conv2d", "params": {"in_channels": 8, "out_channels": 16, "kernel": [5,5], "padding": [2,2]}}],
      [{"id": "dw", "kind": "DepthwiseConv2d", "params": {"channels": 8, "kernel": [3,3], "padding": [1,1]}},
       {"id": "pw", "kind": "Conv2d", "params": {"in_channels": 8, "out_channels": 16, "kernel": [1,1]}}]
    ]},
    {"id": "relu2", "kind": "ReLU"},
    {"id": "pool2", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "sn3",   "kind": "SuperNetCombiner", "supernet_branches": [
      [{"id": "c3", "kind": "Conv2d", "params": {"in_channels": 16, "out_channels": 16, "kernel": [3,3], "padding": [1,1]}}],
      [{"id": "c5", "kind": "Conv2d", "params": {"in_channels": 16, "out_channels": 16, "kernel": [5,5], "padding": [2,2]}}],
      [{"id": "dw", "kind": "DepthwiseConv2d", "params": {"channels": 16, "kernel": [3,3], "padding": [1,1]}},
       {"id": "pw", "kind": "Conv2d", "params": {"in_channels": 16, "out_channels": 16, "kernel": [1,1]}}],
      [{"id": "skip", "kind": "Identity"}]
    ]},
    {"id": "relu3", "kind": "ReLU"},
    {"id": "pool3", "kind": "MaxPool", "params": {"kernel": [2,2]}},
    {"id": "flat",  "kind": "Flatten"},
    {"id": "fc",    "kind": "Linear",  "params": {"in_features": 64, "out_features": 3}},
    {"id": "out",   "kind": "Output"}
  ],
  "edges": [
    ["in","sn1",0], ["sn1","relu1",0], ["relu1","pool1",0],
    ["pool1","sn2",0], ["sn2","relu2",0], ["relu2","pool2",0],
    ["pool2","sn3",0], ["sn3","relu3",0], ["relu3","pool3",0],
    ["pool3","flat",0], ["flat","fc",0], ["fc","out",0]
  ],
  "outputs": ["out"]
}"#;

pub fn builtin_graph(name: &str) -> Result<Graph<f32>> {
    match name {
        "shapes16-cnn" => schema::parse_graph(SHAPES16_CNN),
        "shapes16-cnn-bn" => schema::parse_graph(SHAPES16_CNN_BN),
        "shapes16-cnn-ref" => schema::parse_graph(SHAPES16_CNN_REF),
        "shapes16-supernet" => schema::parse_graph(SHAPES16_SUPERNET),
        other => Err(ForgeError::config(format!(
            "unknown built-in graph '{}' (available: shapes16-cnn, shapes16-cnn-bn, shapes16-cnn-ref, shapes16-supernet)",
            other
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        for name in ["shapes16-cnn", "shapes16-cnn-bn", "shapes16-cnn-ref", "shapes16-supernet"] {
            builtin_graph(name).unwrap();
        }
        assert!(builtin_graph("nope").is_err());
    }
}
