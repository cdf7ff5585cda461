//! Reusable gradient, gate and model checks shared by the test targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use snip_core::autograd::{analytic_grad, finite_diff_check, Activation, Graph, Tensor, Var};
use snip_core::error::Result;
use snip_core::gates::{ActivationStats, BlockKind, GateConfig};
use snip_core::model::{forward_example, insert_params, Architecture, ForwardCtx, ModelConfig, ModelParams};

pub const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

/// Contracts `y` with a fixed random weighting so no gradient cancels by symmetry.
fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut r = super::rng(rng_seed ^ 0xabcd);
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
    let p = g.mul_const(y, &w)?;
    Ok(g.sum(p))
}

/// Max relative finite-difference error of every differentiable op at one
/// seeded point, keyed by op name.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = super::rng(seed);
    let mut out = Vec::new();
    let (m, k, n) = (3, 4, 5);
    let a = rand_tensor(&mut rng, &[m, k]);
    let b = rand_tensor(&mut rng, &[k, n]);
    let bt = rand_tensor(&mut rng, &[n, k]);
    let row = rand_tensor(&mut rng, &[1, k]);
    let x = rand_tensor(&mut rng, &[m, k]);
    let gain = rand_tensor(&mut rng, &[1, k]);
    let bias = rand_tensor(&mut rng, &[1, k]);
    let mask: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let off0 = rand_off_zero(&mut rng, &[m, k]);
    let s = seed;

    macro_rules! check {
        ($name:expr, $x:expr, $f:expr) => {
            out.push(($name, finite_diff_check($f, &$x, H)?));
        };
    }
    check!("matmul.lhs", a, |g: &mut Graph, v: Var| {
        let c = g.constant(b.clone());
        let y = g.matmul(v, c)?;
        project(g, y, s)
    });
    check!("matmul.rhs", b, |g: &mut Graph, v: Var| {
        let c = g.constant(a.clone());
        let y = g.matmul(c, v)?;
        project(g, y, s)
    });
    check!("matmul_t.lhs", a, |g: &mut Graph, v: Var| {
        let c = g.constant(bt.clone());
        let y = g.matmul_t(v, c)?;
        project(g, y, s)
    });
    check!("matmul_t.rhs", bt, |g: &mut Graph, v: Var| {
        let c = g.constant(a.clone());
        let y = g.matmul_t(c, v)?;
        project(g, y, s)
    });
    check!("add", a, |g: &mut Graph, v: Var| {
        let c = g.constant(x.clone());
        let cb = g.constant(b.clone());
        let y = g.add(v, c)?;
        let y = g.matmul(y, cb)?;
        project(g, y, s)
    });
    check!("add_row.row", row, |g: &mut Graph, v: Var| {
        let c = g.constant(a.clone());
        let y = g.add_row(c, v)?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("scale", a, |g: &mut Graph, v: Var| {
        let y = g.scale(v, -1.7);
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("mul_const", a, |g: &mut Graph, v: Var| {
        let y = g.mul_const(v, &mask)?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("softmax_rows", a, |g: &mut Graph, v: Var| {
        let y = g.softmax_rows(v);
        project(g, y, s)
    });
    check!("layer_norm.x", x, |g: &mut Graph, v: Var| {
        let (gn, bs) = (g.constant(gain.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(v, gn, bs, 1e-5)?;
        project(g, y, s)
    });
    check!("layer_norm.gain", gain, |g: &mut Graph, v: Var| {
        let (xv, bs) = (g.constant(x.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(xv, v, bs, 1e-5)?;
        project(g, y, s)
    });
    check!("layer_norm.bias", bias, |g: &mut Graph, v: Var| {
        let (xv, gn) = (g.constant(x.clone()), g.constant(gain.clone()));
        let y = g.layer_norm(xv, gn, v, 1e-5)?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("relu", off0, |g: &mut Graph, v: Var| {
        let y = g.activation(v, Activation::Relu);
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("gelu", a, |g: &mut Graph, v: Var| {
        let y = g.activation(v, Activation::Gelu);
        project(g, y, s)
    });
    check!("tanh", a, |g: &mut Graph, v: Var| {
        let y = g.tanh(v);
        project(g, y, s)
    });
    let max_abs = off0.max_abs();
    check!("s_epsilon.open", off0, |g: &mut Graph, v: Var| {
        let (y, _) = g.s_epsilon(v, 0.5 * max_abs, 1e5);
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("s_epsilon.closed", off0, |g: &mut Graph, v: Var| {
        let (y, _) = g.s_epsilon(v, 1.5 * max_abs, 1e5);
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    // Inside the linear band with a small L, away from ties for the argmax.
    let mut banded = off0.clone();
    banded.data_mut()[0] = max_abs + 0.2;
    let top = banded.max_abs();
    check!("s_epsilon.band", banded, |g: &mut Graph, v: Var| {
        let (y, _) = g.s_epsilon(v, top - 0.05, 10.0);
        project(g, y, s)
    });
    check!("gather_rows", a, |g: &mut Graph, v: Var| {
        let y = g.gather_rows(v, &[2, 0, 2, 1])?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("concat_rows", row, |g: &mut Graph, v: Var| {
        let c = g.constant(a.clone());
        let y = g.concat_rows(v, c)?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    check!("select_row", a, |g: &mut Graph, v: Var| {
        let y = g.select_row(v, 1)?;
        let y = g.softmax_rows(y);
        project(g, y, s)
    });
    let target = (seed % n as u64) as usize;
    let logits = rand_tensor(&mut rng, &[1, n]);
    check!("cross_entropy", logits, |g: &mut Graph, v: Var| g.cross_entropy(v, target));
    check!("sum", a, |g: &mut Graph, v: Var| {
        let y = g.tanh(v);
        Ok(g.sum(y))
    });
    check!("abs_sum", off0, |g: &mut Graph, v: Var| Ok(g.abs_sum(v)));
    let (u, vv) = unit_pair(&mut rng, k, n);
    let mut w = rand_tensor(&mut rng, &[k, n]);
    for (idx, x) in w.data_mut().iter_mut().enumerate() {
        *x = 0.3 * *x + 2.0 * u[idx / n] * vv[idx % n];
    }
    check!("spectral_scale", w, |g: &mut Graph, v: Var| {
        let y = g.spectral_scale(v, &u, &vv, 5.0)?;
        let c = g.constant(a.clone());
        let y = g.matmul(c, y)?;
        let y = g.tanh(y);
        project(g, y, s)
    });
    Ok(out)
}

/// Positive random unit vectors.
fn unit_pair(rng: &mut ChaCha8Rng, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = |len: usize| {
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(0.2..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    (draw(k), draw(n))
}

pub fn tiny_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 4,
        num_heads: 2,
        d_k: 2,
        d_v: 2,
        d_ffn: 6,
        vocab_size: 7,
        max_seq_len: 5,
        num_classes: 3,
        activation,
        layer_norm_eps: 1e-5,
    }
}

fn block_max_abs(
    cfg: &ModelConfig,
    arch: &Architecture,
    params: &ModelParams,
    tokens: &[u32],
    gate: Option<&GateConfig>,
) -> Result<ActivationStats> {
    let mut g = Graph::new();
    let pv = insert_params(&mut g, params, false);
    let ctx = ForwardCtx::new(cfg, arch, gate);
    let mut stats = ActivationStats::new();
    forward_example(&mut g, &pv, &ctx, tokens, Some(&mut stats), None)?;
    Ok(stats)
}

/// ε in the widest gap between sorted values, or 0 if there is no gap.
fn widest_gap(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.windows(2)
        .map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1])))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map_or(0.0, |(_, mid)| mid)
}

/// Seeded tiny 2-layer model with a gate that closes some blocks and opens
/// others, every block at least `margin` away from its threshold.
pub fn gated_model(seed: u64, margin: f64) -> Result<(ModelConfig, Architecture, ModelParams, Vec<u32>, usize, GateConfig)> {
    let act = if seed.is_multiple_of(2) { Activation::Gelu } else { Activation::Relu };
    let cfg = tiny_config(act);
    let arch = Architecture::full(&cfg);
    let mut params = ModelParams::init(&cfg, &arch, seed)?;
    // Non-zero biases so their gradients are exercised.
    let mut r = super::rng(seed ^ 77);
    params.for_each_mut(&mut |_, t| {
        if t.rows() == 1 && t.data().iter().all(|x| *x == 0.0) {
            for x in t.data_mut() {
                *x = r.random_range(-0.3..0.3);
            }
        }
    });
    let mut rng = super::rng(seed);
    let len = rng.random_range(2..=cfg.max_seq_len);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..cfg.vocab_size as u32)).collect();
    let label = rng.random_range(0..cfg.num_classes);

    let ungated = block_max_abs(&cfg, &arch, &params, &tokens, None)?;
    let heads: Vec<f64> = ungated.blocks().filter(|(b, _)| b.kind == BlockKind::AttentionHead).map(|(_, s)| s.mean_max_abs()).collect();
    let ffns: Vec<f64> = ungated.blocks().filter(|(b, _)| b.kind == BlockKind::Ffn).map(|(_, s)| s.mean_max_abs()).collect();
    let mut gate = GateConfig::new(widest_gap(heads), widest_gap(ffns));
    // Downstream blocks move once upstream ones gate; fall back to an open
    // gate on any kind whose threshold lands near a block.
    for _ in 0..3 {
        let st = block_max_abs(&cfg, &arch, &params, &tokens, Some(&gate))?;
        let mut ok = true;
        for (b, s) in st.blocks() {
            let eps = if b.kind == BlockKind::Ffn { gate.eps_ffn } else { gate.eps_att };
            if eps > 0.0 && (s.mean_max_abs() - eps).abs() < margin {
                ok = false;
                if b.kind == BlockKind::Ffn {
                    gate.eps_ffn = 0.0;
                } else {
                    gate.eps_att = 0.0;
                }
            }
        }
        if ok {
            break;
        }
    }
    Ok((cfg, arch, params, tokens, label, gate))
}

/// Finite-difference agreement of a tiny gated 2-layer model's loss.
pub struct ModelGradReport {
    /// Max relative error over every parameter except the key biases.
    pub max_rel_err: f64,
    /// Largest analytic key-bias gradient. Softmax is invariant to the shift
    /// they add to each score row, so the true value is exactly zero and the
    /// relative metric would only measure round-off.
    pub key_bias_grad: f64,
}

pub fn model_grad_error(seed: u64) -> Result<ModelGradReport> {
    let (cfg, arch, params, tokens, label, gate) = gated_model(seed, 1e-3)?;
    let keys = params.keys();
    let leaves: Vec<Tensor> = params.leaves().into_iter().cloned().collect();
    let mut rep = ModelGradReport {
        max_rel_err: 0.0,
        key_bias_grad: 0.0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let mut pv = insert_params(g, &params, false);
            *pv.leaves_mut()[i] = v;
            let ctx = ForwardCtx::new(&cfg, &arch, Some(&gate));
            let logits = forward_example(g, &pv, &ctx, &tokens, None, None)?;
            g.cross_entropy(logits, label)
        };
        if keys[i].name.ends_with(".bk") {
            let a = analytic_grad(&f, leaf)?;
            rep.key_bias_grad = a.iter().fold(rep.key_bias_grad, |m, x| m.max(x.abs()));
        } else {
            rep.max_rel_err = rep.max_rel_err.max(finite_diff_check(f, leaf, H)?);
        }
    }
    Ok(rep)
}

/// Seeded matrix with both sides in `1..=max_dim`.
pub fn seeded_matrix(seed: u64, max_dim: usize) -> Vec<Vec<f64>> {
    let mut r = super::rng(seed ^ 0x5151);
    let rows = r.random_range(1..=max_dim);
    let cols = r.random_range(1..=max_dim);
    super::random_matrix(&mut r, rows, cols)
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(m.len(), m[0].len(), super::flatten(m)).unwrap()
}

/// Worst relative errors over `n` seeded matrices: the power-iteration
/// estimate against the Jacobi oracle, and the re-estimated norm after
/// rescaling to `target` against `target`.
pub fn spectral_sweep(n: u64, max_dim: usize, target: f64) -> (f64, f64) {
    use snip_core::spectral::{estimate_spectral_norm, normalize_weight};
    let (mut est_err, mut renorm_err) = (0.0_f64, 0.0_f64);
    for seed in 0..n {
        let m = seeded_matrix(seed, max_dim);
        let oracle = super::svd_sigma_max(&m);
        let w = to_tensor(&m);
        let est = estimate_spectral_norm(&w, 1e-15, 200_000).sigma;
        est_err = est_err.max((est - oracle).abs() / oracle);
        let w_hat = normalize_weight(&w, est, target);
        let again = super::svd_sigma_max(&tensor_rows(&w_hat));
        renorm_err = renorm_err.max((again - target).abs() / target);
    }
    (est_err, renorm_err)
}

pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Seeded random token sequences (no PAD) of varying length.
pub fn random_batch(seed: u64, n: usize, cfg: &ModelConfig) -> Vec<Vec<u32>> {
    let mut r = super::rng(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=cfg.max_seq_len);
            (0..len).map(|_| r.random_range(2..cfg.vocab_size as u32)).collect()
        })
        .collect()
}

/// Largest per-example pre-gate max-abs of every block over `batch`.
fn block_peaks(
    cfg: &ModelConfig,
    arch: &Architecture,
    params: &ModelParams,
    batch: &[Vec<u32>],
    gate: Option<&GateConfig>,
) -> Result<Vec<(snip_core::gates::BlockId, f64)>> {
    let mut peaks: std::collections::BTreeMap<_, f64> = Default::default();
    for t in batch {
        for (b, s) in block_max_abs(cfg, arch, params, t, gate)?.blocks() {
            let e = peaks.entry(*b).or_insert(0.0);
            *e = e.max(s.mean_max_abs());
        }
    }
    Ok(peaks.into_iter().collect())
}

/// For blocks measured with identity rate 1.0 on a seeded batch, the largest
/// logit change caused by physically removing each of them.
///
pub fn removal_deltas(seed: u64) -> Result<Vec<(snip_core::gates::BlockId, f64)>> {
    use snip_core::model::model_forward;
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 3,
        d_k: 3,
        d_v: 3,
        d_ffn: 12,
        vocab_size: 11,
        max_seq_len: 6,
        num_classes: 3,
        activation: if seed.is_multiple_of(2) { Activation::Gelu } else { Activation::Relu },
        layer_norm_eps: 1e-5,
    };
    let arch = Architecture::full(&cfg);
    let params = ModelParams::init(&cfg, &arch, seed)?;
    let batch = random_batch(seed ^ 0xba7c, 40, &cfg);
    // Layer-0 blocks only see upstream gates, so thresholds derived from
    // them are guaranteed to close at least one head and one FFN everywhere.
    let layer0 = |peaks: &[(snip_core::gates::BlockId, f64)], kind: BlockKind| {
        let mut v: Vec<f64> = peaks.iter().filter(|(b, _)| b.kind == kind && b.layer == 0).map(|(_, p)| *p).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let heads = layer0(&block_peaks(&cfg, &arch, &params, &batch, None)?, BlockKind::AttentionHead);
    let mut gate = GateConfig::new(0.5 * (heads[0] + heads[1]), 0.0);
    let ffn = layer0(&block_peaks(&cfg, &arch, &params, &batch, Some(&gate))?, BlockKind::Ffn);
    gate.eps_ffn = 1.01 * ffn[0];
    let ctx = ForwardCtx::new(&cfg, &arch, Some(&gate));
    let mut stats = ActivationStats::new();
    let base = model_forward(&batch, &params, &ctx, Some(&mut stats))?;
    let mut out = Vec::new();
    for (b, _) in stats.blocks() {
        if stats.identity_rate(b)? < 1.0 {
            continue;
        }
        let smaller = arch.without(b);
        let mut p = params.clone();
        p.restrict_to(&smaller);
        let ctx2 = ForwardCtx::new(&cfg, &smaller, Some(&gate));
        let logits = model_forward(&batch, &p, &ctx2, None)?;
        let d = base.data().iter().zip(logits.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.push((*b, d));
    }
    Ok(out)
}

/// Small, fast schedule on a seeded redundant-head task.
pub fn small_schedule(seed: u64) -> Result<(snip_core::pruning::ScheduleConfig, snip_core::data::Dataset, snip_core::data::Dataset)> {
    use snip_core::data::{make_synthetic_task, TaskSpec};
    use snip_core::pruning::{OptimizerConfig, PruneConfig, ScheduleConfig, SnConfig};
    let spec = TaskSpec {
        size: 240,
        seq_len: 8,
        seed,
        ..TaskSpec::default()
    };
    let (train, eval) = make_synthetic_task(&spec)?;
    let model = ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_k: 4,
        d_v: 4,
        d_ffn: 16,
        vocab_size: train.vocab.len(),
        max_seq_len: spec.seq_len,
        num_classes: train.num_classes,
        ..ModelConfig::default()
    };
    let cfg = ScheduleConfig {
        model,
        prune: PruneConfig {
            train_epochs: 3,
            prior_epochs: 1,
            retrain_epochs: 1,
            max_iterations: 3,
            ..PruneConfig::default()
        },
        optimizer: OptimizerConfig::default(),
        sn: SnConfig {
            target: 1.0,
            ..SnConfig::default()
        },
        sharpness: snip_core::gates::DEFAULT_SHARPNESS,
        seed,
    };
    Ok((cfg, train, eval))
}

/// Gated-block counts per batch, one row per ε scale in `scales`.
///
/// Both thresholds are the given fraction of the largest per-kind mean
/// max-abs of the ungated model; parameters are never touched.
pub fn epsilon_sweep(
    state: &snip_core::pruning::ModelState,
    data: &snip_core::data::Dataset,
    sn: &snip_core::pruning::SnConfig,
    scales: &[f64],
    batch_size: usize,
) -> Result<Vec<Vec<u64>>> {
    use snip_core::gates::AttentionGating;
    use snip_core::pruning::collect_stats;
    let base = collect_stats(state, data, sn, None, AttentionGating::PerHead)?;
    let top = |kind: BlockKind| {
        base.blocks().filter(|(b, _)| b.kind == kind).map(|(_, s)| s.mean_max_abs()).fold(0.0, f64::max)
    };
    let (att, ffn) = (top(BlockKind::AttentionHead), top(BlockKind::Ffn));
    let batches: Vec<snip_core::data::Dataset> = data
        .examples
        .chunks(batch_size)
        .map(|c| snip_core::data::Dataset {
            examples: c.to_vec(),
            ..data.clone()
        })
        .collect();
    scales
        .iter()
        .map(|q| {
            let gate = GateConfig::new(q * att, q * ffn);
            batches
                .iter()
                .map(|b| {
                    let st = collect_stats(state, b, sn, Some(&gate), AttentionGating::PerHead)?;
                    Ok(st.blocks().map(|(_, s)| s.zero_count).sum())
                })
                .collect()
        })
        .collect()
}

/// Elementwise gate semantics on `n` seeded vectors whose max-abs lands
/// below, on, inside and above the `[ε, ε + 1/L]` band. Returns the number
/// of mismatches.
pub fn gate_semantics_mismatches(n: u64) -> usize {
    use snip_core::gates::{s_epsilon, t_epsilon};
    let l = snip_core::gates::DEFAULT_SHARPNESS;
    let mut r = super::rng(0x6a7e);
    let mut bad = 0;
    for i in 0..n {
        let eps = r.random_range(0.01..2.0);
        let len = r.random_range(1..20);
        let target = match i % 6 {
            0 => eps,
            1 => eps + 1.0 / l,
            2 => r.random_range(0.0..eps),
            3 => eps + r.random_range(0.0..1.0) / l,
            4 => eps + 1.0 / l + r.random_range(0.0..1.0),
            _ => r.random_range(0.0..2.0 * eps + 1.0),
        };
        let mut v: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0) * target).collect();
        let at = r.random_range(0..len);
        v[at] = if r.random_bool(0.5) { target } else { -target };
        let m = v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let tv = Tensor::vector(v.clone());
        let out = s_epsilon(&tv, eps, l);
        let t = t_epsilon(&tv, eps, l);
        let ok = if m <= eps {
            t == 0.0 && out.data().iter().all(|x| *x == 0.0)
        } else if m >= eps + 1.0 / l {
            t == 1.0 && out.data() == v.as_slice()
        } else {
            let want = l * (m - eps);
            (t - want).abs() <= 1e-9 && out.data().iter().zip(&v).all(|(o, x)| (o - want * x).abs() <= 1e-9 * x.abs().max(1.0))
        };
        if !ok {
            bad += 1;
        }
    }
    bad
}
