//! Sinusoidal embeddings of sensor placement labels and sampling frequency.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{PlacementSet, SamplingFrequency, IMU_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub d_model: usize,
    pub base: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            base: 10000.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn new(d_model: usize, base: f64) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(invalid(format!("d_model must be even and positive, got {d_model}")));
        }
        if !(base > 1.0 && base.is_finite()) {
            return Err(invalid(format!("embedding base must exceed 1, got {base}")));
        }
        Ok(Self { d_model, base })
    }
}

/// Entry `2k` is `sin(pos / base^(2k/d))`, entry `2k+1` the matching cosine.
pub fn sinusoid_embed(pos: usize, cfg: &EmbeddingConfig) -> DVector<f64> {
    let d = cfg.d_model;
    let pos = pos as f64;
    DVector::from_fn(d, |i, _| {
        let k = (i / 2) * 2;
        let angle = pos / cfg.base.powf(k as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// One row per mounted IMU, in sorted label order.
pub fn embed_placement(z: &PlacementSet, cfg: &EmbeddingConfig) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(IMU_COUNT, cfg.d_model);
    for (r, &label) in z.labels().iter().enumerate() {
        m.set_row(r, &sinusoid_embed(label as usize, cfg).transpose());
    }
    m
}

/// Embeds the frequency by its ordinal (5 Hz -> 0, ..., 50 Hz -> 3).
pub fn embed_frequency(f: SamplingFrequency, cfg: &EmbeddingConfig) -> DVector<f64> {
    sinusoid_embed(f.ordinal(), cfg)
}
