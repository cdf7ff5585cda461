use serde::{Deserialize, Serialize};

use crate::autograd::Activation;
use crate::error::{Error, Result};

/// Shape of an encoder-style Transformer classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 16,
            num_heads: 4,
            d_k: 4,
            d_v: 4,
            d_ffn: 32,
            vocab_size: 32,
            max_seq_len: 16,
            num_classes: 2,
            activation: Activation::Relu,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 12 layers, 768 wide, 12 heads of 64, FFN 3072.
    pub fn bert_base() -> Self {
        Self {
            num_layers: 12,
            d_model: 768,
            num_heads: 12,
            d_k: 64,
            d_v: 64,
            d_ffn: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            num_classes: 2,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model.num_layers", self.num_layers),
            ("model.d_model", self.d_model),
            ("model.num_heads", self.num_heads),
            ("model.d_k", self.d_k),
            ("model.d_v", self.d_v),
            ("model.d_ffn", self.d_ffn),
            ("model.vocab_size", self.vocab_size),
            ("model.max_seq_len", self.max_seq_len),
            ("model.num_classes", self.num_classes),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be > 0"));
        }
        Ok(())
    }
}
