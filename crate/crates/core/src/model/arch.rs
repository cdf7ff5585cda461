use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gates::{BlockId, BlockKind};

/// Surviving units of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerArch {
    pub heads: BTreeSet<usize>,
    pub ffn_alive: bool,
}

impl LayerArch {
    /// False only once every head has been pruned.
    pub fn attention_alive(&self) -> bool {
        !self.heads.is_empty()
    }
}

/// Live structure of the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerArch>,
}

impl Architecture {
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|_| LayerArch {
                    heads: (0..config.num_heads).collect(),
                    ffn_alive: true,
                })
                .collect(),
        }
    }

    pub fn empty(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|_| LayerArch {
                    heads: BTreeSet::new(),
                    ffn_alive: false,
                })
                .collect(),
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(Error::Contract(format!(
                "architecture has {} layers, config expects {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(h) = layer.heads.iter().find(|h| **h >= config.num_heads) {
                return Err(Error::Contract(format!("layer {l}: head {h} >= {}", config.num_heads)));
            }
        }
        Ok(())
    }

    pub fn live_heads(&self) -> usize {
        self.layers.iter().map(|l| l.heads.len()).sum()
    }

    pub fn live_ffns(&self) -> usize {
        self.layers.iter().filter(|l| l.ffn_alive).count()
    }

    pub fn is_empty(&self) -> bool {
        self.live_heads() == 0 && self.live_ffns() == 0
    }

    /// Live head and FFN blocks in `(layer, kind, head)` order.
    pub fn live_blocks(&self) -> Vec<BlockId> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.heads.iter().map(|h| BlockId::head(l, *h)));
            if layer.ffn_alive {
                out.push(BlockId::ffn(l));
            }
        }
        out
    }

    pub fn is_alive(&self, block: &BlockId) -> bool {
        let Some(layer) = self.layers.get(block.layer) else {
            return false;
        };
        match block.kind {
            BlockKind::AttentionHead => block.head.is_some_and(|h| layer.heads.contains(&h)),
            BlockKind::AttentionLayer => layer.attention_alive(),
            BlockKind::Ffn => layer.ffn_alive,
        }
    }

    /// Copy with `block` removed. Removing an attention layer drops all its heads.
    pub fn without(&self, block: &BlockId) -> Architecture {
        let mut a = self.clone();
        if let Some(layer) = a.layers.get_mut(block.layer) {
            match block.kind {
                BlockKind::AttentionHead => {
                    if let Some(h) = block.head {
                        layer.heads.remove(&h);
                    }
                }
                BlockKind::AttentionLayer => layer.heads.clear(),
                BlockKind::Ffn => layer.ffn_alive = false,
            }
        }
        a
    }

    /// Compact textual map, e.g. `L0[h0,h2|F] L1[-|-]`.
    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let heads = if layer.heads.is_empty() {
                    "-".to_string()
                } else {
                    layer.heads.iter().map(|h| format!("h{h}")).collect::<Vec<_>>().join(",")
                };
                format!("L{l}[{heads}|{}]", if layer.ffn_alive { "F" } else { "-" })
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
