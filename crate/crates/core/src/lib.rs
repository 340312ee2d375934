//! Differentiable ensemble Kalman filtering for learned soft-robot state
//! estimation.
//!
//! The crate bundles the filter recursion ([`filter`]), the four learnable
//! sub-modules ([`models`]) built on a small network engine ([`nn`]),
//! sinusoidal placement and frequency embeddings ([`embed`]), a synthetic
//! soft-arm generator with dataset I/O ([`sim`], [`dataset`]), end-to-end
//! training ([`train`]) and the missing-observation and virtual-force
//! procedures ([`downstream`]).

pub mod error;
pub mod types;
pub mod seed;
pub mod nn;
pub mod embed;
pub mod filter;
pub mod models;
pub mod checkpoint;
pub mod dataset;
pub mod sim;
pub mod train;
pub mod downstream;

pub use error::{Error, Result};
pub use types::*;
