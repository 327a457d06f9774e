//! Dual-scale context alignment for time series with a small GPT-style
//! backbone.
//!
//! A window is cut into patches, interleaved with a byte-tokenized prompt and
//! packed into one token sequence. Two directed graphs are built over that
//! sequence: a fine one over tokens and a coarse one over whole series parts,
//! prompt copies and labels. GCN blocks on both graphs, joined by a learnable
//! coarse→fine map, run at chosen depths of the transformer.
//!
//! Modules, bottom up: [`numerics`] (tensors and reverse-mode autodiff),
//! [`tsembed`] (patching and sequence layout), [`graphspec`] (edge sets and
//! adjacency), [`dscagnn`] (the dual-scale block), [`backbone`] (transformer,
//! heads, losses), [`model`], [`data`], [`metrics`], [`harness`] (training,
//! ablation, CLI).

pub mod backbone;
pub mod data;
pub mod dscagnn;
pub mod error;
pub mod graphspec;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tsembed;

pub use error::{Error, Result};
