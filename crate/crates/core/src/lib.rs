//! Miniature Transformer classifier with ε-gated strict-identity residual
//! blocks, spectral normalisation, and greedy iterative structured pruning of
//! attention heads and feed-forward layers.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod exec;
pub mod gates;
pub mod io;
pub mod model;
pub mod pruning;
pub mod spectral;

pub use error::{Error, Result};
