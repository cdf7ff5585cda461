use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::gates::BlockId;

/// Role of a parameter, used by spectral normalization, the L1 prior and
/// accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    /// Attention or FFN weight matrix (spectrally normalized when enabled).
    Projection,
    /// Attention or FFN bias.
    Bias,
    LayerNorm,
    Pooler,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamKey {
    pub name: String,
    pub kind: ParamKind,
    /// Gated residual block owning this parameter, if any.
    pub block: Option<BlockId>,
}

impl ParamKey {
    fn new(name: impl Into<String>, kind: ParamKind, block: Option<BlockId>) -> Self {
        Self {
            name: name.into(),
            kind,
            block,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    /// Slice `W^O_i` of the output projection, `d_v × d_model`.
    pub wo: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub heads: BTreeMap<usize, HeadParams<T>>,
    /// Output-projection bias; present while any head is alive.
    pub attn_bias: Option<T>,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ffn: Option<FfnParams<T>>,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// Model parameters, generic over the leaf type so the same layout carries
/// tensors, graph handles, gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub cls_emb: T,
    pub emb_ln_gain: T,
    pub emb_ln_bias: T,
    pub layers: Vec<LayerParams<T>>,
    pub pooler_w: T,
    pub pooler_b: T,
    pub classifier_w: T,
    pub classifier_b: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    /// Parameter keys in the fixed visiting order.
    pub fn keys(&self) -> Vec<ParamKey> {
        use ParamKind::*;
        let mut out = vec![
            ParamKey::new("tok_emb", Embedding, None),
            ParamKey::new("pos_emb", Embedding, None),
            ParamKey::new("cls_emb", Embedding, None),
            ParamKey::new("emb_ln_gain", Embedding, None),
            ParamKey::new("emb_ln_bias", Embedding, None),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for h in layer.heads.keys() {
                let b = Some(BlockId::head(l, *h));
                let p = format!("layer{l}.head{h}");
                for (n, kind) in [
                    ("wq", Projection),
                    ("bq", Bias),
                    ("wk", Projection),
                    ("bk", Bias),
                    ("wv", Projection),
                    ("bv", Bias),
                    ("wo", Projection),
                ] {
                    out.push(ParamKey::new(format!("{p}.{n}"), kind, b));
                }
            }
            if layer.attn_bias.is_some() {
                out.push(ParamKey::new(format!("layer{l}.attn_bias"), Bias, Some(BlockId::attention(l))));
            }
            out.push(ParamKey::new(format!("layer{l}.ln1_gain"), LayerNorm, None));
            out.push(ParamKey::new(format!("layer{l}.ln1_bias"), LayerNorm, None));
            if layer.ffn.is_some() {
                let b = Some(BlockId::ffn(l));
                for (n, kind) in [("w1", Projection), ("b1", Bias), ("w2", Projection), ("b2", Bias)] {
                    out.push(ParamKey::new(format!("layer{l}.ffn.{n}"), kind, b));
                }
            }
            out.push(ParamKey::new(format!("layer{l}.ln2_gain"), LayerNorm, None));
            out.push(ParamKey::new(format!("layer{l}.ln2_bias"), LayerNorm, None));
        }
        out.push(ParamKey::new("pooler_w", Pooler, None));
        out.push(ParamKey::new("pooler_b", Pooler, None));
        out.push(ParamKey::new("classifier_w", Classifier, None));
        out.push(ParamKey::new("classifier_b", Classifier, None));
        out
    }

    /// Leaves in the same order as [`Params::keys`].
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.cls_emb, &self.emb_ln_gain, &self.emb_ln_bias];
        for layer in &self.layers {
            for hp in layer.heads.values() {
                out.extend([&hp.wq, &hp.bq, &hp.wk, &hp.bk, &hp.wv, &hp.bv, &hp.wo]);
            }
            out.extend(layer.attn_bias.as_ref());
            out.extend([&layer.ln1_gain, &layer.ln1_bias]);
            if let Some(f) = &layer.ffn {
                out.extend([&f.w1, &f.b1, &f.w2, &f.b2]);
            }
            out.extend([&layer.ln2_gain, &layer.ln2_bias]);
        }
        out.extend([&self.pooler_w, &self.pooler_b, &self.classifier_w, &self.classifier_b]);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.cls_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for layer in &mut self.layers {
            for hp in layer.heads.values_mut() {
                out.extend([&mut hp.wq, &mut hp.bq, &mut hp.wk, &mut hp.bk, &mut hp.wv, &mut hp.bv, &mut hp.wo]);
            }
            out.extend(layer.attn_bias.as_mut());
            out.extend([&mut layer.ln1_gain, &mut layer.ln1_bias]);
            if let Some(f) = &mut layer.ffn {
                out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
            }
            out.extend([&mut layer.ln2_gain, &mut layer.ln2_bias]);
        }
        out.extend([
            &mut self.pooler_w,
            &mut self.pooler_b,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]);
        out
    }

    /// Visits every parameter in a fixed order.
    pub fn for_each(&self, f: &mut impl FnMut(&ParamKey, &T)) {
        for (k, t) in self.keys().iter().zip(self.leaves()) {
            f(k, t);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&ParamKey, &mut T)) {
        let keys = self.keys();
        for (k, t) in keys.iter().zip(self.leaves_mut()) {
            f(k, t);
        }
    }

    /// Structure-preserving map in the same order as [`Params::for_each`].
    pub fn map<U>(&self, f: &mut impl FnMut(&ParamKey, &T) -> U) -> Params<U> {
        let mut out: Vec<U> = Vec::new();
        self.for_each(&mut |k, t| out.push(f(k, t)));
        let mut it = out.into_iter();
        self.rebuild_with(&mut it)
    }

    pub fn try_map<U>(&self, f: &mut impl FnMut(&ParamKey, &T) -> Result<U>) -> Result<Params<U>> {
        let mut out: Vec<U> = Vec::new();
        let mut err = None;
        self.for_each(&mut |k, t| {
            if err.is_none() {
                match f(k, t) {
                    Ok(u) => out.push(u),
                    Err(e) => err = Some(e),
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut it = out.into_iter();
        Ok(self.rebuild_with(&mut it))
    }

    /// Same layout as `self`, leaves taken from `it` in visiting order.
    pub fn rebuild_with<U>(&self, it: &mut impl Iterator<Item = U>) -> Params<U> {
        let mut next = || it.next().expect("leaf count mismatch");
        let tok_emb = next();
        let pos_emb = next();
        let cls_emb = next();
        let emb_ln_gain = next();
        let emb_ln_bias = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut heads = BTreeMap::new();
            for h in layer.heads.keys() {
                heads.insert(
                    *h,
                    HeadParams {
                        wq: next(),
                        bq: next(),
                        wk: next(),
                        bk: next(),
                        wv: next(),
                        bv: next(),
                        wo: next(),
                    },
                );
            }
            let attn_bias = layer.attn_bias.as_ref().map(|_| next());
            let ln1_gain = next();
            let ln1_bias = next();
            let ffn = layer.ffn.as_ref().map(|_| FfnParams {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
            let ln2_gain = next();
            let ln2_bias = next();
            layers.push(LayerParams {
                heads,
                attn_bias,
                ln1_gain,
                ln1_bias,
                ffn,
                ln2_gain,
                ln2_bias,
            });
        }
        Params {
            tok_emb,
            pos_emb,
            cls_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
            pooler_w: next(),
            pooler_b: next(),
            classifier_w: next(),
            classifier_b: next(),
        }
    }

    /// Drops parameters of units no longer alive in `arch`, keeping the rest
    /// untouched.
    pub fn restrict_to(&mut self, arch: &Architecture) {
        for (layer, la) in self.layers.iter_mut().zip(&arch.layers) {
            layer.heads.retain(|h, _| la.heads.contains(h));
            if !la.attention_alive() {
                layer.attn_bias = None;
            }
            if !la.ffn_alive {
                layer.ffn = None;
            }
        }
    }

    /// Whether the parameter set is exactly the one implied by `arch`.
    pub fn matches(&self, arch: &Architecture) -> bool {
        self.layers.len() == arch.layers.len()
            && self.layers.iter().zip(&arch.layers).all(|(l, a)| {
                l.heads.keys().copied().eq(a.heads.iter().copied())
                    && l.attn_bias.is_some() == a.attention_alive()
                    && l.ffn.is_some() == a.ffn_alive
            })
    }
}

impl Params<Tensor> {
    /// Seeded initialization for `arch`.
    ///
    /// Projections use `N(0, 2/(fan_in+fan_out))`, embeddings `N(0, 1)`,
    /// biases zero and layer-norm gains one.
    pub fn init(config: &ModelConfig, arch: &Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        arch.check(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            if rows == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(rows, cols, data).expect("sized")
            }
        };
        let xavier = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();
        let d = config.d_model;
        let zeros = |n: usize| Tensor::vector(vec![0.0; n]);
        let ones = |n: usize| Tensor::vector(vec![1.0; n]);

        let tok_emb = normal(config.vocab_size, d, 1.0);
        let pos_emb = normal(config.max_seq_len + 1, d, 1.0);
        let cls_emb = normal(1, d, 1.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        // Every layer draws the full set so that pruned units do not shift the
        // initialization of survivors.
        for la in &arch.layers {
            let mut heads = BTreeMap::new();
            for h in 0..config.num_heads {
                let hp = HeadParams {
                    wq: normal(d, config.d_k, xavier(d, config.d_k)),
                    bq: zeros(config.d_k),
                    wk: normal(d, config.d_k, xavier(d, config.d_k)),
                    bk: zeros(config.d_k),
                    wv: normal(d, config.d_v, xavier(d, config.d_v)),
                    bv: zeros(config.d_v),
                    wo: normal(config.d_v, d, xavier(config.d_v * config.num_heads, d)),
                };
                if la.heads.contains(&h) {
                    heads.insert(h, hp);
                }
            }
            let ffn = FfnParams {
                w1: normal(d, config.d_ffn, xavier(d, config.d_ffn)),
                b1: zeros(config.d_ffn),
                w2: normal(config.d_ffn, d, xavier(config.d_ffn, d)),
                b2: zeros(d),
            };
            layers.push(LayerParams {
                heads,
                attn_bias: la.attention_alive().then(|| zeros(d)),
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                ffn: la.ffn_alive.then_some(ffn),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
            });
        }
        Ok(Params {
            tok_emb,
            pos_emb,
            cls_emb,
            emb_ln_gain: ones(d),
            emb_ln_bias: zeros(d),
            layers,
            pooler_w: normal(d, d, xavier(d, d)),
            pooler_b: zeros(d),
            classifier_w: normal(d, config.num_classes, xavier(d, config.num_classes)),
            classifier_b: zeros(config.num_classes),
        })
    }

    pub fn total_elements(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.is_finite());
        ok
    }

    /// Checks tensor shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let mut err = None;
        let expect = |key: &ParamKey| -> Vec<usize> {
            let last = key.name.rsplit('.').next().unwrap_or("");
            match (key.name.as_str(), last) {
                ("tok_emb", _) => vec![config.vocab_size, d],
                ("pos_emb", _) => vec![config.max_seq_len + 1, d],
                ("pooler_w", _) => vec![d, d],
                ("classifier_w", _) => vec![d, config.num_classes],
                ("classifier_b", _) => vec![config.num_classes],
                (_, "wq") | (_, "wk") => vec![d, config.d_k],
                (_, "wv") => vec![d, config.d_v],
                (_, "wo") => vec![config.d_v, d],
                (_, "bq") | (_, "bk") => vec![config.d_k],
                (_, "bv") => vec![config.d_v],
                (_, "w1") => vec![d, config.d_ffn],
                (_, "b1") => vec![config.d_ffn],
                (_, "w2") => vec![config.d_ffn, d],
                _ => vec![d],
            }
        };
        if self.layers.len() != config.num_layers {
            return Err(Error::Contract("layer count mismatch".into()));
        }
        self.for_each(&mut |k, t| {
            if err.is_none() {
                let e = expect(k);
                if t.shape() != e.as_slice() {
                    err = Some(Error::Shape {
                        op: "param",
                        left: t.shape().to_vec(),
                        right: e,
                    });
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}
