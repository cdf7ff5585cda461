//! The ε-sparsity gate and the per-block activation statistics it feeds.
//!
//! A residual branch output `v` is scaled by
//! `t_ε(v) = 1 − ReLU(1 − L · max_i ReLU(|v_i| − ε))`, which is exactly zero
//! when every `|v_i| ≤ ε`, exactly one once `max|v_i| ≥ ε + 1/L`, and linear
//! in between.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_SHARPNESS: f64 = 1e5;
pub const HISTOGRAM_BINS: usize = 64;

/// How attention residuals are gated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionGating {
    /// One gate per head contribution `head_i W^O_i`.
    #[default]
    PerHead,
    /// One gate over the summed multi-head output of a layer.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub eps_att: f64,
    pub eps_ffn: f64,
    pub sharpness: f64,
    pub attention: AttentionGating,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            eps_att: 0.0,
            eps_ffn: 0.0,
            sharpness: DEFAULT_SHARPNESS,
            attention: AttentionGating::PerHead,
        }
    }
}

impl GateConfig {
    pub fn new(eps_att: f64, eps_ffn: f64) -> Self {
        Self {
            eps_att,
            eps_ffn,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    AttentionHead,
    AttentionLayer,
    Ffn,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::AttentionHead => "head",
            BlockKind::AttentionLayer => "attention",
            BlockKind::Ffn => "ffn",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, BlockKind::Ffn)
    }
}

/// A prunable residual block. `head` is set iff `kind` is `AttentionHead`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub layer: usize,
    pub kind: BlockKind,
    pub head: Option<usize>,
}

impl BlockId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self {
            layer,
            kind: BlockKind::AttentionHead,
            head: Some(head),
        }
    }

    pub fn attention(layer: usize) -> Self {
        Self {
            layer,
            kind: BlockKind::AttentionLayer,
            head: None,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            kind: BlockKind::Ffn,
            head: None,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "L{}.H{}", self.layer, h),
            None => write!(f, "L{}.{}", self.layer, self.kind.as_str().to_uppercase()),
        }
    }
}

/// Largest absolute entry and the first index attaining it.
pub fn max_abs_argmax(v: &[f64]) -> (f64, usize) {
    let mut best = 0.0;
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        let a = x.abs();
        if a > best {
            best = a;
            idx = i;
        }
    }
    (best, idx)
}

/// Gate value from the branch's max-abs response.
///
/// The band edges are compared directly so that `t` is exactly 0 at
/// `max_abs ≤ ε` and exactly 1 at `max_abs ≥ ε + 1/L`; evaluating the ReLU
/// stack in floating point can land a rounding error short of 1 at the
/// upper edge.
pub fn gate_from_max_abs(max_abs: f64, eps: f64, sharpness: f64) -> f64 {
    if max_abs <= eps {
        0.0
    } else if max_abs >= eps + 1.0 / sharpness {
        1.0
    } else {
        (sharpness * (max_abs - eps)).clamp(0.0, 1.0)
    }
}

/// `t_ε(v)`; depends on `v` only through `max|v_i|`.
pub fn t_epsilon(v: &Tensor, eps: f64, sharpness: f64) -> f64 {
    gate_from_max_abs(v.max_abs(), eps, sharpness)
}

/// `S_ε(v) = t_ε(v) · v`. Exactly the zero tensor in the gated regime.
pub fn s_epsilon(v: &Tensor, eps: f64, sharpness: f64) -> Tensor {
    v.scaled(t_epsilon(v, eps, sharpness))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub count: u64,
    pub sum_max_abs: f64,
    pub zero_count: u64,
    /// Per-example max-abs values, kept for histograms.
    pub values: Vec<f64>,
}

impl BlockStats {
    pub fn mean_max_abs(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_max_abs / self.count as f64
        }
    }
}

/// One histogram bin `[lo, hi)`; the last bin is closed.
#[derive(Clone, Debug, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

/// Running per-block statistics of pre-gate max-abs outputs and gate events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(BlockId, BlockStats)>", into = "Vec<(BlockId, BlockStats)>")]
pub struct ActivationStats {
    blocks: BTreeMap<BlockId, BlockStats>,
}

impl From<Vec<(BlockId, BlockStats)>> for ActivationStats {
    fn from(v: Vec<(BlockId, BlockStats)>) -> Self {
        Self {
            blocks: v.into_iter().collect(),
        }
    }
}

impl From<ActivationStats> for Vec<(BlockId, BlockStats)> {
    fn from(s: ActivationStats) -> Self {
        s.blocks.into_iter().collect()
    }
}

impl ActivationStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, block: BlockId, max_abs: f64, gated_zero: bool) {
        debug_assert!(max_abs >= 0.0);
        let s = self.blocks.entry(block).or_default();
        s.count += 1;
        s.sum_max_abs += max_abs;
        s.zero_count += u64::from(gated_zero);
        s.values.push(max_abs);
    }

    /// Folds `other` into `self`. Merge in a fixed order to keep sums
    /// bit-reproducible.
    pub fn merge(&mut self, other: &ActivationStats) {
        for (id, o) in &other.blocks {
            let s = self.blocks.entry(*id).or_default();
            s.count += o.count;
            s.zero_count += o.zero_count;
            // replay one at a time so the result equals sequential recording
            for v in &o.values {
                s.sum_max_abs += v;
            }
            s.values.extend_from_slice(&o.values);
        }
    }

    pub fn get(&self, block: &BlockId) -> Option<&BlockStats> {
        self.blocks.get(block)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&BlockId, &BlockStats)> {
        self.blocks.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn mean_max_abs(&self, block: &BlockId) -> Result<f64> {
        match self.blocks.get(block) {
            Some(s) if s.count > 0 => Ok(s.mean_max_abs()),
            _ => Err(Error::NoData(format!("no activations recorded for {block}"))),
        }
    }

    /// Fraction of recorded examples on which `block` gated to exact zero.
    pub fn identity_rate(&self, block: &BlockId) -> Result<f64> {
        match self.blocks.get(block) {
            Some(s) if s.count > 0 => Ok(s.zero_count as f64 / s.count as f64),
            _ => Err(Error::NoData(format!("no activations recorded for {block}"))),
        }
    }

    /// 64 uniform bins over `[0, observed max]` for one block.
    pub fn histogram(&self, block: &BlockId) -> Vec<HistBin> {
        let Some(s) = self.blocks.get(block) else {
            return Vec::new();
        };
        let max = s.values.iter().cloned().fold(0.0_f64, f64::max);
        let width = if max > 0.0 { max / HISTOGRAM_BINS as f64 } else { 1.0 / HISTOGRAM_BINS as f64 };
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for v in &s.values {
            let b = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                count,
            })
            .collect()
    }
}
