//! Roofline latency bounds and static parameter memory.
//!
//! Latency covers decoder layers only: prefill is modeled as compute-bound
//! and decode as memory-bound (weights plus KV-cache reload per step). The
//! number of experts never enters the latency terms, only the number of
//! active experts per token does.

use serde::{Deserialize, Serialize};

use crate::config::{HardwareProfile, ModelShape, Workload};
use crate::error::Result;

/// Bytes per gigabyte used in every report.
pub const BYTES_PER_GB: f64 = 1e9;

/// Effective FFN expansion `r = k * d_mid / d` (`k = 1` for dense shapes).
pub fn expansion_ratio(shape: &ModelShape) -> f64 {
    shape.active_experts() as f64 * shape.mlp_dim as f64 / shape.hidden_dim as f64
}

fn gqa(shape: &ModelShape) -> f64 {
    shape.num_heads as f64 / shape.num_kv_heads as f64
}

/// Prefill FLOP coefficient `4 + 4/gqa + 6r`.
pub fn prefill_coefficient(shape: &ModelShape) -> f64 {
    4.0 + 4.0 / gqa(shape) + 6.0 * expansion_ratio(shape)
}

/// Decode weight-traffic coefficient `2 + 2/gqa + 3r`.
pub fn decode_coefficient(shape: &ModelShape) -> f64 {
    2.0 + 2.0 / gqa(shape) + 3.0 * expansion_ratio(shape)
}

/// Mean context length during decode, `S_in + (S_out + 1)/2`.
pub fn mean_context(wl: &Workload) -> f64 {
    wl.prompt_len as f64 + (wl.gen_len as f64 + 1.0) / 2.0
}

/// `L * S_in * d^2 * xi_F / pi_H`, in seconds.
///
/// The per-layer term is formed first, so `T(L) == L * T(1)` exactly.
pub fn prefill_latency(shape: &ModelShape, hw: &HardwareProfile, wl: &Workload) -> f64 {
    let d = shape.hidden_dim as f64;
    let per_layer = wl.prompt_len as f64 * d * d * prefill_coefficient(shape) / hw.peak_flops;
    shape.num_layers as f64 * per_layer
}

/// `L * S_out * (xi_W * d^2 * b_w + 2 * S_bar * d * b_kv / gqa) / beta_H`, in seconds.
pub fn decode_latency(shape: &ModelShape, hw: &HardwareProfile, wl: &Workload) -> f64 {
    let d = shape.hidden_dim as f64;
    let weights = decode_coefficient(shape) * d * d * hw.weight_bytes;
    let kv = 2.0 * mean_context(wl) * d * hw.kv_bytes / gqa(shape);
    let per_layer = wl.gen_len as f64 * (weights + kv) / hw.mem_bandwidth;
    shape.num_layers as f64 * per_layer
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub prefill_bound: Bound,
    pub decode_bound: Bound,
}

pub fn total_latency(shape: &ModelShape, hw: &HardwareProfile, wl: &Workload) -> LatencyBreakdown {
    let prefill_s = prefill_latency(shape, hw, wl);
    let decode_s = decode_latency(shape, hw, wl);
    LatencyBreakdown {
        prefill_s,
        decode_s,
        total_s: prefill_s + decode_s,
        prefill_bound: Bound::Compute,
        decode_bound: Bound::Memory,
    }
}

/// Non-layer parameters: embedding (plus an untied head) and the final norm.
fn global_params(shape: &ModelShape) -> usize {
    let embed = shape.vocab_size * shape.hidden_dim;
    let head = if shape.tied_embedding { 0 } else { embed };
    embed + head + shape.hidden_dim
}

/// Attention projections, QK norms and the two layer norms of one layer.
fn layer_shared_params(shape: &ModelShape) -> usize {
    let (d, dh) = (shape.hidden_dim, shape.head_dim);
    (shape.num_heads + 2 * shape.num_kv_heads) * dh * d + d * d + 2 * dh + 2 * d
}

fn params_with_experts(shape: &ModelShape, experts: usize) -> usize {
    let d = shape.hidden_dim;
    let router = shape.moe.map_or(0, |m| m.num_experts * d);
    let per_layer = layer_shared_params(shape) + router + 3 * experts * d * shape.mlp_dim;
    global_params(shape) + shape.num_layers * per_layer
}

/// Static parameter count and bytes at `hw.weight_bytes`, with every layer
/// holding `N` experts and an `N x d` router (dense: one MLP, no router).
pub fn static_memory(shape: &ModelShape, hw: &HardwareProfile) -> Result<(usize, f64)> {
    let shape = shape.clone().validate()?;
    let params = params_with_experts(&shape, shape.total_experts());
    Ok((params, params as f64 * hw.weight_bytes))
}

/// Parameters touched per token: `k` experts instead of `N`, router kept.
pub fn active_params(shape: &ModelShape) -> Result<usize> {
    let shape = shape.clone().validate()?;
    Ok(params_with_experts(&shape, shape.active_experts()))
}

/// One evaluated configuration, as emitted by the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub config_id: String,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "N")]
    pub experts: usize,
    pub k: usize,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub params_total: usize,
    pub params_active: usize,
    pub bytes: f64,
}

pub fn estimate(config_id: &str, shape: &ModelShape, hw: &HardwareProfile, wl: &Workload) -> Result<CostRecord> {
    let shape = shape.clone().validate()?;
    let hw = hw.validate()?;
    let wl = wl.validate()?;
    let latency = total_latency(&shape, &hw, &wl);
    let (params_total, bytes) = static_memory(&shape, &hw)?;
    Ok(CostRecord {
        config_id: config_id.to_string(),
        layers: shape.num_layers,
        experts: shape.total_experts(),
        k: shape.active_experts(),
        prefill_s: latency.prefill_s,
        decode_s: latency.decode_s,
        total_s: latency.total_s,
        params_total,
        params_active: active_params(&shape)?,
        bytes,
    })
}
