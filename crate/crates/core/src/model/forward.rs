use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, HeadParams, LayerParams, ModelConfig, ModelParams, Params};
use crate::autograd::{Graph, Tensor, Var};
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::exec;
use crate::gates::{ActivationStats, AttentionGating, BlockId, GateConfig};

/// Inverted dropout with its own seeded stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply(&mut self, g: &mut Graph, v: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(v);
        }
        let keep = 1.0 - self.rate;
        let n = g.value(v).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(v, &mask)
    }
}

/// Everything a forward pass reads besides parameters and tokens.
#[derive(Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub config: &'a ModelConfig,
    pub arch: &'a Architecture,
    /// `None` takes the ungated code path.
    pub gate: Option<&'a GateConfig>,
    /// Whether attention is gated (and its statistics recorded) per head or
    /// per layer.
    pub granularity: AttentionGating,
}

impl<'a> ForwardCtx<'a> {
    /// Granularity follows `gate`, or is per-head when ungated.
    pub fn new(config: &'a ModelConfig, arch: &'a Architecture, gate: Option<&'a GateConfig>) -> Self {
        Self {
            config,
            arch,
            gate,
            granularity: gate.map_or(AttentionGating::PerHead, |g| g.attention),
        }
    }

    pub fn with_granularity(mut self, granularity: AttentionGating) -> Self {
        self.granularity = granularity;
        self
    }
}

/// Single-head self-attention `softmax((xWq)(xWk)ᵀ/√d_k)·(xWv)`.
///
/// `biases` holds optional `(bq, bk, bv)`.
pub fn attention_head(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    biases: Option<(Var, Var, Var)>,
    d_k: usize,
) -> Result<Var> {
    let mut q = g.matmul(x, wq)?;
    let mut k = g.matmul(x, wk)?;
    let mut v = g.matmul(x, wv)?;
    if let Some((bq, bk, bv)) = biases {
        q = g.add_row(q, bq)?;
        k = g.add_row(k, bk)?;
        v = g.add_row(v, bv)?;
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let probs = g.softmax_rows(scores);
    g.matmul(probs, v)
}

/// Applies the ε gate to a branch output and records its pre-gate max-abs.
fn gate_branch(
    g: &mut Graph,
    v: Var,
    eps: f64,
    gate: Option<&GateConfig>,
    block: BlockId,
    stats: &mut Option<&mut ActivationStats>,
) -> Var {
    let max_abs = g.value(v).max_abs();
    match gate {
        Some(gc) => {
            let (out, t) = g.s_epsilon(v, eps, gc.sharpness);
            if let Some(s) = stats.as_deref_mut() {
                s.record(block, max_abs, t == 0.0);
            }
            out
        }
        None => {
            if let Some(s) = stats.as_deref_mut() {
                s.record(block, max_abs, false);
            }
            v
        }
    }
}

fn head_contribution(
    g: &mut Graph,
    x: Var,
    hp: &HeadParams<Var>,
    bias_share: Option<Var>,
    d_k: usize,
) -> Result<Var> {
    let h = attention_head(g, x, hp.wq, hp.wk, hp.wv, Some((hp.bq, hp.bk, hp.bv)), d_k)?;
    let c = g.matmul(h, hp.wo)?;
    match bias_share {
        Some(b) => g.add_row(c, b),
        None => Ok(c),
    }
}

/// `LayerNorm(Σ_i S_ε(head_i W^O_i) + x)` over the live heads of `layer`.
///
/// The output-projection bias is split evenly across the configured heads and
/// travels inside each head's gate, so a gated head contributes exactly zero.
/// With no live heads this is `LayerNorm(x)`.
pub fn mha_residual_forward(
    g: &mut Graph,
    x: Var,
    layer_idx: usize,
    layer: &LayerParams<Var>,
    ctx: &ForwardCtx,
    mut stats: Option<&mut ActivationStats>,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if layer.heads.is_empty() {
        return g.layer_norm(x, layer.ln1_gain, layer.ln1_bias, ctx.config.layer_norm_eps);
    }
    let share = layer.attn_bias.map(|b| g.scale(b, 1.0 / ctx.config.num_heads as f64));
    let eps = ctx.gate.map_or(0.0, |gc| gc.eps_att);
    let per_layer = ctx.granularity == AttentionGating::PerLayer;
    let mut total: Option<Var> = None;
    for (h, hp) in &layer.heads {
        let c = head_contribution(g, x, hp, share, ctx.config.d_k)?;
        let c = if per_layer {
            c
        } else {
            gate_branch(g, c, eps, ctx.gate, BlockId::head(layer_idx, *h), &mut stats)
        };
        total = Some(match total {
            Some(t) => g.add(t, c)?,
            None => c,
        });
    }
    let mut branch = total.expect("at least one head");
    if per_layer {
        branch = gate_branch(g, branch, eps, ctx.gate, BlockId::attention(layer_idx), &mut stats);
    }
    if let Some(d) = dropout {
        branch = d.apply(g, branch)?;
    }
    let sum = g.add(x, branch)?;
    g.layer_norm(sum, layer.ln1_gain, layer.ln1_bias, ctx.config.layer_norm_eps)
}

/// `LayerNorm(S_ε(FFN(x)) + x)`, or `LayerNorm(x)` when the FFN is pruned.
pub fn ffn_residual_forward(
    g: &mut Graph,
    x: Var,
    layer_idx: usize,
    layer: &LayerParams<Var>,
    ctx: &ForwardCtx,
    mut stats: Option<&mut ActivationStats>,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let Some(ffn) = &layer.ffn else {
        return g.layer_norm(x, layer.ln2_gain, layer.ln2_bias, ctx.config.layer_norm_eps);
    };
    let h = g.matmul(x, ffn.w1)?;
    let h = g.add_row(h, ffn.b1)?;
    let h = g.activation(h, ctx.config.activation);
    let f = g.matmul(h, ffn.w2)?;
    let f = g.add_row(f, ffn.b2)?;
    let eps = ctx.gate.map_or(0.0, |gc| gc.eps_ffn);
    let mut branch = gate_branch(g, f, eps, ctx.gate, BlockId::ffn(layer_idx), &mut stats);
    if let Some(d) = dropout {
        branch = d.apply(g, branch)?;
    }
    let sum = g.add(x, branch)?;
    g.layer_norm(sum, layer.ln2_gain, layer.ln2_bias, ctx.config.layer_norm_eps)
}

/// Token validation shared by every entry point.
pub fn check_tokens(tokens: &[u32], config: &ModelConfig) -> Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|t| **t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass for one sequence, returning the `1 × num_classes` logits.
///
/// A CLS vector is prepended at position 0. PAD tokens are dropped before
/// any attention, which is equivalent to masking them out of every softmax
/// and out of the gate statistics; other tokens keep their original position.
pub fn forward_example(
    g: &mut Graph,
    p: &Params<Var>,
    ctx: &ForwardCtx,
    tokens: &[u32],
    mut stats: Option<&mut ActivationStats>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    check_tokens(tokens, ctx.config)?;
    let (ids, positions): (Vec<usize>, Vec<usize>) = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t != PAD_ID)
        .map(|(i, t)| (*t as usize, i + 1))
        .unzip();
    let cls = g.gather_rows(p.cls_emb, &[0])?;
    let mut x = if ids.is_empty() {
        cls
    } else {
        let toks = g.gather_rows(p.tok_emb, &ids)?;
        g.concat_rows(cls, toks)?
    };
    let mut pos_ids = vec![0];
    pos_ids.extend(positions);
    let pos = g.gather_rows(p.pos_emb, &pos_ids)?;
    x = g.add(x, pos)?;
    if let Some(d) = dropout.as_deref_mut() {
        x = d.apply(g, x)?;
    }
    x = g.layer_norm(x, p.emb_ln_gain, p.emb_ln_bias, ctx.config.layer_norm_eps)?;
    for (l, layer) in p.layers.iter().enumerate() {
        x = mha_residual_forward(g, x, l, layer, ctx, stats.as_deref_mut(), dropout.as_deref_mut())?;
        x = ffn_residual_forward(g, x, l, layer, ctx, stats.as_deref_mut(), dropout.as_deref_mut())?;
    }
    let first = g.select_row(x, 0)?;
    let pooled = g.matmul(first, p.pooler_w)?;
    let pooled = g.add_row(pooled, p.pooler_b)?;
    let pooled = g.tanh(pooled);
    let logits = g.matmul(pooled, p.classifier_w)?;
    g.add_row(logits, p.classifier_b)
}

/// Inserts every parameter as a graph leaf.
pub fn insert_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> Params<Var> {
    params.map(&mut |_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
}

/// Batched inference: one graph per example, logits stacked as `b × C`.
///
/// Per-example statistics are merged into `stats` in batch order.
pub fn model_forward(
    batch: &[Vec<u32>],
    params: &ModelParams,
    ctx: &ForwardCtx,
    stats: Option<&mut ActivationStats>,
) -> Result<Tensor> {
    if !params.matches(ctx.arch) {
        return Err(Error::Contract("parameters do not match architecture".into()));
    }
    let want_stats = stats.is_some();
    let results = exec::map_ordered(batch, |_, tokens| -> Result<(Vec<f64>, ActivationStats)> {
        let mut g = Graph::new();
        let pv = insert_params(&mut g, params, false);
        let mut st = ActivationStats::new();
        let logits = forward_example(&mut g, &pv, ctx, tokens, want_stats.then_some(&mut st), None)?;
        Ok((g.value(logits).data().to_vec(), st))
    });
    let mut data = Vec::with_capacity(batch.len() * ctx.config.num_classes);
    let mut merged = ActivationStats::new();
    for r in results {
        let (row, st) = r?;
        data.extend(row);
        merged.merge(&st);
    }
    if let Some(s) = stats {
        s.merge(&merged);
    }
    Tensor::matrix(batch.len(), ctx.config.num_classes, data)
}
