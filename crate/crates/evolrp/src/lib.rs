//! Attribution toolkit for small convolutional classifiers.
//!
//! The crate covers the full loop from model to tuned explanation:
//!
//! * [`tensor`] / [`net`]: dense tensors, a sequential layer stack with
//!   recorded activations, manual backpropagation, and SGD training.
//! * [`data`]: deterministic procedural shape images (single- and
//!   multi-object) standing in for a real image corpus.
//! * [`lrp`]: layer-wise relevance propagation with a per-layer rule
//!   assignment (plain, epsilon-stabilized, and alpha/beta variants) plus
//!   conservation diagnostics.
//! * [`metrics`]: faithfulness correlation, average sensitivity, and Gini
//!   sparseness with seeded sampling and batch aggregation.
//! * [`cmaes`] / [`evo`]: a from-scratch CMA-ES and the rule-tuning layer on
//!   top of it, including a bi-objective scalarization sweep with
//!   non-dominated filtering and knee-point selection.
//! * [`baselines`]: integrated gradients, GradCAM, grid-patch LIME, and
//!   occlusion for side-by-side comparison.
//! * [`maps`]: class-contrast and composite maps, percentile clamping, and
//!   heatmap export (PGM/PNG/CSV).
//!
//! Every randomized routine takes an explicit 64-bit seed and derives
//! per-purpose substreams from it, so identical inputs reproduce identical
//! outputs within one build.

pub mod baselines;
pub mod cmaes;
pub mod data;
pub mod error;
pub mod evo;
pub mod lrp;
pub mod maps;
pub mod metrics;
pub mod model_io;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
