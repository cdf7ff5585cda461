use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{AttentionGating, BlockKind};

/// Which residual blocks are pruning candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Individual heads and FFNs, pruned separately.
    #[default]
    SingleHeadAndFfn,
    AttentionOnly,
    FfnOnly,
    /// A layer's attention goes as a unit, under a single layer-level gate.
    WholeAttentionLayer,
    /// A layer goes only when both its attention and its FFN qualify.
    WholeLayer,
}

impl PruneMode {
    pub const ALL: [PruneMode; 5] = [
        PruneMode::SingleHeadAndFfn,
        PruneMode::AttentionOnly,
        PruneMode::FfnOnly,
        PruneMode::WholeAttentionLayer,
        PruneMode::WholeLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::SingleHeadAndFfn => "single_head_and_ffn",
            PruneMode::AttentionOnly => "attention_only",
            PruneMode::FfnOnly => "ffn_only",
            PruneMode::WholeAttentionLayer => "whole_attention_layer",
            PruneMode::WholeLayer => "whole_layer",
        }
    }

    pub fn granularity(self) -> AttentionGating {
        match self {
            PruneMode::WholeAttentionLayer | PruneMode::WholeLayer => AttentionGating::PerLayer,
            _ => AttentionGating::PerHead,
        }
    }

    /// The attention block kind this mode estimates ε for, if any.
    pub fn attention_kind(self) -> Option<BlockKind> {
        match self {
            PruneMode::SingleHeadAndFfn | PruneMode::AttentionOnly => Some(BlockKind::AttentionHead),
            PruneMode::WholeAttentionLayer | PruneMode::WholeLayer => Some(BlockKind::AttentionLayer),
            PruneMode::FfnOnly => None,
        }
    }

    pub fn targets_ffn(self) -> bool {
        matches!(self, PruneMode::SingleHeadAndFfn | PruneMode::FfnOnly | PruneMode::WholeLayer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// ε is the k-th smallest mean max-abs per block kind.
    pub k: usize,
    /// Blocks with identity rate ≥ θ are pruned.
    pub theta: f64,
    pub mode: PruneMode,
    pub max_iterations: usize,
    /// Largest tolerated eval-accuracy drop below the baseline.
    pub accuracy_budget: f64,
    pub l1_factor: f64,
    /// Epochs for the ungated baseline.
    pub train_epochs: usize,
    /// Epochs of training with the identity-inducing prior.
    pub prior_epochs: usize,
    /// Epochs of retraining after removal.
    pub retrain_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: 1,
            theta: 0.95,
            mode: PruneMode::SingleHeadAndFfn,
            max_iterations: 12,
            accuracy_budget: 0.01,
            l1_factor: 0.01,
            train_epochs: 8,
            prior_epochs: 2,
            retrain_epochs: 2,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("prune.k", "must be >= 1"));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::config("prune.theta", format!("{} is outside (0, 1]", self.theta)));
        }
        if !(self.accuracy_budget >= 0.0) {
            return Err(Error::config("prune.accuracy_budget", "must be >= 0"));
        }
        if !(self.l1_factor >= 0.0) {
            return Err(Error::config("prune.l1_factor", "must be >= 0"));
        }
        if self.train_epochs == 0 {
            return Err(Error::config("prune.train_epochs", "must be >= 1"));
        }
        Ok(())
    }
}
