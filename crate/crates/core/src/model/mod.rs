//! Encoder Transformer classifier with ε-gated residual sub-layers.

pub mod accounting;
mod arch;
mod config;
mod forward;
mod params;

pub use accounting::{count_flops, count_params};
pub use arch::{Architecture, LayerArch};
pub use config::ModelConfig;
pub use forward::{
    attention_head, check_tokens, ffn_residual_forward, forward_example, insert_params, mha_residual_forward,
    model_forward, Dropout, ForwardCtx,
};
pub use params::{FfnParams, HeadParams, LayerParams, ModelParams, ParamKey, ParamKind, Params};
