//! Analytic forward-pass FLOP count.
//!
//! Per block, with sequence length `s` and width `d` (one multiply-add = 2):
//!
//! * projections `Q, K, V, O`:      `2·s·d·(3d + d)`
//! * attention scores and values:   `2·2·s²·d`
//! * feed-forward `d → 4d → d`:     `2·s·2·d·4d`
//!
//! plus `2·s·d` once for the token + position embedding add. Layer norms,
//! softmax and activations are not counted.

use serde::Serialize;

use super::model::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopEstimate {
    pub embedding: u64,
    pub per_layer: u64,
    pub layers: u64,
    pub total: u64,
}

pub fn layer_flops(d_model: u64, seq_len: u64) -> u64 {
    let (s, d) = (seq_len, d_model);
    let projections = 2 * s * d * (3 * d + d);
    let attention = 2 * 2 * s * s * d;
    let ffn = 2 * s * 2 * d * 4 * d;
    projections + attention + ffn
}

/// FLOPs for a forward pass through the first `k` blocks (`k = 0` leaves the
/// embedding term only).
pub fn estimate_flops(config: &EncoderConfig, k: usize, seq_len: usize) -> Result<FlopEstimate> {
    if seq_len > config.max_seq {
        return Err(Error::Length(format!(
            "sequence length {seq_len} exceeds max_seq {}",
            config.max_seq
        )));
    }
    let d = config.d_model as u64;
    let s = seq_len as u64;
    let per_layer = layer_flops(d, s);
    let layers = per_layer * k as u64;
    let embedding = 2 * s * d;
    Ok(FlopEstimate {
        embedding,
        per_layer,
        layers,
        total: embedding + layers,
    })
}

/// Ratio of the pruned layer-stack cost to the full layer-stack cost, `k/L`.
pub fn layer_ratio(config: &EncoderConfig, k: usize, seq_len: usize) -> Result<f64> {
    let pruned = estimate_flops(config, k, seq_len)?;
    let full = estimate_flops(config, config.n_layers, seq_len)?;
    Ok(pruned.layers as f64 / full.layers as f64)
}
