//! Gradient-based joint optimization of network weights and architecture.
//!
//! This crate trains neural-network weights and *architectural* parameters
//! together by gradient descent to trace accuracy-vs-cost Pareto fronts.
//! Three optimization methods share one substrate:
//!
//! - **supernet** — path-based search: parallel candidate branches are blended
//!   with Gumbel-Softmax weights and the best branch is kept at export;
//! - **pit** — mask-based channel search (structured pruning): binary
//!   per-channel masks with straight-through gradients shrink layers in place;
//! - **mps** — differentiable mixed-precision search: each weight/activation
//!   tensor blends fake-quantized variants at several bitwidths and settles on
//!   one.
//!
//! Networks are described as an explicit DAG ([`graph::Graph`]) built from a
//! JSON description. Conversion passes ([`passes`]) identify target layers,
//! share channel masks across coupled layers, fold batch norm, attach
//! effective shape/bitwidth calculators, and export clean graphs once a search
//! finishes. Differentiable cost models ([`cost`]) turn effective shapes and
//! bitwidths into scalar regularizers, and the training harness ([`train`])
//! runs searches, lambda sweeps and sequential pipelines.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `forge` binary for the `run` / `sweep` / `export` / `report` commands.

pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod graph;
pub mod mps;
pub mod passes;
pub mod pit;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{ForgeError, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
