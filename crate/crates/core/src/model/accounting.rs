//! Parameter and FLOP accounting over the attention and FFN sub-layers only;
//! embeddings, pooler, classifier and layer norms are outside the boundary.

use super::{Architecture, ModelConfig};

/// Weights and biases owned by one head: `W^Q_i, W^K_i, W^V_i, W^O_i` and the
/// three input-projection biases.
pub fn head_param_count(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    let (dk, dv) = (c.d_k as u64, c.d_v as u64);
    2 * (d * dk + dk) + (d * dv + dv) + dv * d
}

/// Output-projection bias, counted once per layer while any head is alive.
pub fn attention_bias_count(c: &ModelConfig) -> u64 {
    c.d_model as u64
}

pub fn ffn_param_count(c: &ModelConfig) -> u64 {
    let (d, f) = (c.d_model as u64, c.d_ffn as u64);
    d * f + f + f * d + d
}

pub fn count_params(config: &ModelConfig, arch: &Architecture) -> u64 {
    arch.layers
        .iter()
        .map(|l| {
            l.heads.len() as u64 * head_param_count(config)
                + if l.attention_alive() { attention_bias_count(config) } else { 0 }
                + if l.ffn_alive { ffn_param_count(config) } else { 0 }
        })
        .sum()
}

/// Weight elements only (no biases).
pub fn count_weights(config: &ModelConfig, arch: &Architecture) -> u64 {
    let d = config.d_model as u64;
    let (dk, dv, f) = (config.d_k as u64, config.d_v as u64, config.d_ffn as u64);
    arch.layers
        .iter()
        .map(|l| l.heads.len() as u64 * (2 * d * dk + 2 * d * dv) + if l.ffn_alive { 2 * d * f } else { 0 })
        .sum()
}

/// Forward FLOPs of one head at sequence length `s` (one multiply-add = 2).
pub fn head_flops(c: &ModelConfig, s: u64) -> u64 {
    let d = c.d_model as u64;
    let (dk, dv) = (c.d_k as u64, c.d_v as u64);
    let proj = 2 * s * d * dk * 2 + 2 * s * d * dv;
    let scores = 2 * s * s * dk;
    let mix = 2 * s * s * dv;
    let out = 2 * s * dv * d;
    proj + scores + mix + out
}

pub fn ffn_flops(c: &ModelConfig, s: u64) -> u64 {
    let (d, f) = (c.d_model as u64, c.d_ffn as u64);
    2 * s * d * f * 2
}

/// Matmul FLOPs of the live attention heads and FFNs; softmax, layer norm,
/// activation and bias adds are not counted.
pub fn count_flops(config: &ModelConfig, arch: &Architecture, seq_len: usize) -> u64 {
    let s = seq_len as u64;
    arch.layers
        .iter()
        .map(|l| {
            l.heads.len() as u64 * head_flops(config, s) + if l.ffn_alive { ffn_flops(config, s) } else { 0 }
        })
        .sum()
}
