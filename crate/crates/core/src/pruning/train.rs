use std::collections::BTreeMap;

use crate::autograd::{Graph, Tensor};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::gates::{ActivationStats, AttentionGating, GateConfig};
use crate::model::{forward_example, insert_params, model_forward, Dropout, ForwardCtx, ModelParams, ParamKind, Params};
use crate::spectral::{self, TraceRow};

use super::optim::{learning_rate_at, Optimizer, OptimizerConfig};
use super::state::{ModelState, SnConfig};

/// Knobs for one training phase.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub sn: SnConfig,
    /// Coefficient of the L1 prior on gated-block parameters.
    pub l1_factor: f64,
    /// `None` trains the plain ungated model.
    pub gate: Option<GateConfig>,
    pub granularity: AttentionGating,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct PhaseOutcome {
    /// Gate statistics gathered during the final epoch.
    pub stats: ActivationStats,
    pub final_loss: f64,
    pub trace: Vec<TraceRow>,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut h = a ^ 0x9e37_79b9_7f4a_7c15;
    for x in [b, c] {
        h = (h ^ x).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

struct SnStep {
    u: Vec<f64>,
    v: Vec<f64>,
    sigma: f64,
    factor: f64,
}

fn add_into(acc: &mut Params<Vec<f64>>, other: &Params<Vec<f64>>) {
    for (a, b) in acc.leaves_mut().into_iter().zip(other.leaves()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Runs `settings.epochs` epochs of minibatch training on `state`.
///
/// Each example gets its own graph; per-example gradients are summed in batch
/// order so results do not depend on the thread count.
pub fn train_phase(state: &mut ModelState, data: &Dataset, settings: &TrainSettings) -> Result<PhaseOutcome> {
    if data.is_empty() {
        return Err(Error::NoData("training set is empty".into()));
    }
    let opt_cfg = &settings.optimizer;
    let mut optimizer = Optimizer::new(opt_cfg.clone());
    let batches_per_epoch = data.len().div_ceil(opt_cfg.batch_size);
    let total_steps = batches_per_epoch * settings.epochs;
    let keys = state.params.keys();
    let mut outcome = PhaseOutcome::default();
    let mut local_step = 0usize;

    for epoch in 0..settings.epochs {
        let last_epoch = epoch + 1 == settings.epochs;
        let mut epoch_loss = 0.0;
        for batch in batch_iter(data.len(), opt_cfg.batch_size, settings.seed, state.epochs) {
            // Spectral normalisation: advance each power iteration once.
            let mut sn_steps: BTreeMap<String, SnStep> = BTreeMap::new();
            if settings.sn.enabled {
                let projections: Vec<(String, Tensor)> = keys
                    .iter()
                    .zip(state.params.leaves())
                    .filter(|(k, _)| k.kind == ParamKind::Projection)
                    .map(|(k, w)| (k.name.clone(), w.clone()))
                    .collect();
                for (name, w) in projections {
                    let st = state.spectral_state(&name, &w);
                    let sigma = st.step(&w);
                    let factor = spectral::sn_factor(sigma, settings.sn.target, settings.sn.mode);
                    sn_steps.insert(
                        name,
                        SnStep {
                            u: st.u.clone(),
                            v: st.v.clone(),
                            sigma,
                            factor,
                        },
                    );
                }
            }
            let effective: ModelParams = state.params.map(&mut |k, w| match sn_steps.get(&k.name) {
                Some(s) if s.factor != 1.0 => w.scaled(s.factor),
                _ => w.clone(),
            });

            let ctx = ForwardCtx::new(&state.config, &state.arch, settings.gate.as_ref())
                .with_granularity(settings.granularity);
            let step = state.step;
            let results = exec::map_ordered(&batch, |_, &idx| -> Result<(f64, Params<Vec<f64>>, ActivationStats)> {
                let ex = &data.examples[idx];
                let mut g = Graph::new();
                let pv = insert_params(&mut g, &effective, true);
                let mut dropout = Dropout::new(opt_cfg.dropout, mix(settings.seed, step, idx as u64));
                let mut st = ActivationStats::new();
                let logits = forward_example(
                    &mut g,
                    &pv,
                    &ctx,
                    &ex.tokens,
                    last_epoch.then_some(&mut st),
                    Some(&mut dropout),
                )?;
                let loss = g.cross_entropy(logits, ex.label)?;
                g.backward(loss)?;
                let loss_val = g.value(loss).data()[0];
                let grads = pv.map(&mut |_, v| {
                    let n = g.value(*v).numel();
                    g.grad(*v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
                });
                Ok((loss_val, grads, st))
            });

            let mut total: Option<Params<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, grads, st) = r?;
                batch_loss += l;
                if last_epoch {
                    outcome.stats.merge(&st);
                }
                match &mut total {
                    Some(t) => add_into(t, &grads),
                    None => total = Some(grads),
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!("loss became {batch_loss} at step {}", state.step)));
            }
            epoch_loss += batch_loss;

            let raw = state.params.leaves();
            let l1 = settings.l1_factor;
            let mut i = 0;
            grads.for_each_mut(&mut |k, gv| {
                let w = raw[i];
                i += 1;
                for x in gv.iter_mut() {
                    *x *= inv;
                }
                if let Some(s) = sn_steps.get(&k.name) {
                    if s.factor != 1.0 {
                        *gv = spectral::rescale_backward(w, gv, &s.u, &s.v, s.sigma, settings.sn.target);
                    }
                }
                if l1 > 0.0 && k.block.is_some() {
                    for (x, wi) in gv.iter_mut().zip(w.data()) {
                        *x += l1 * sign(*wi);
                    }
                }
            });
            let lr = learning_rate_at(opt_cfg.learning_rate, opt_cfg.warmup_fraction, local_step, total_steps);
            optimizer.step(&mut state.params, &grads, lr);
            if !state.params.is_finite() {
                return Err(Error::Diverged(format!("non-finite weights after step {}", state.step)));
            }
            state.step += 1;
            local_step += 1;
        }
        state.epochs += 1;
        outcome.final_loss = epoch_loss / batches_per_epoch as f64;
        let eff = state.effective_params(&settings.sn);
        outcome.trace.extend(spectral::log_spectral_trace(&eff, state.step));
    }
    Ok(outcome)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logits for `data` under the weights the model applies at inference.
pub fn predict(
    state: &ModelState,
    data: &Dataset,
    sn: &SnConfig,
    gate: Option<&GateConfig>,
    granularity: AttentionGating,
    stats: Option<&mut ActivationStats>,
) -> Result<Tensor> {
    let eff = state.effective_params(sn);
    let ctx = ForwardCtx::new(&state.config, &state.arch, gate).with_granularity(granularity);
    model_forward(&data.tokens(), &eff, &ctx, stats)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Classification accuracy.
pub fn evaluate(
    state: &ModelState,
    data: &Dataset,
    sn: &SnConfig,
    gate: Option<&GateConfig>,
    granularity: AttentionGating,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::NoData("evaluation set is empty".into()));
    }
    let logits = predict(state, data, sn, gate, granularity, None)?;
    let correct = argmax_rows(&logits)
        .into_iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
