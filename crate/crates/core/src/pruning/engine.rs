use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::{ActivationStats, AttentionGating, BlockId, BlockKind, GateConfig};
use crate::model::{count_flops, count_params, Architecture, ModelConfig};
use crate::spectral::TraceRow;

use super::config::{PruneConfig, PruneMode};
use super::optim::OptimizerConfig;
use super::state::{ModelState, SnConfig};
use super::train::{evaluate, predict, train_phase, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordNote {
    Baseline,
    Pruned,
    /// No block reached θ.
    Null,
    /// Nothing left to prune.
    Exhausted,
    /// Eval metric fell below the budget; this architecture is not reported.
    OverBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: BlockId,
    pub alive: bool,
    pub identity_rate: Option<f64>,
    pub mean_max_abs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub iteration: usize,
    pub eps_att: f64,
    pub eps_ffn: f64,
    pub pruned: Vec<BlockId>,
    pub params: u64,
    pub flops: u64,
    pub train_metric: f64,
    pub eval_metric: f64,
    pub blocks: Vec<BlockRecord>,
    pub note: RecordNote,
    pub arch: Architecture,
}

/// Everything a schedule needs besides data.
#[derive(Clone, Debug)]
pub struct ScheduleConfig {
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub optimizer: OptimizerConfig,
    pub sn: SnConfig,
    pub sharpness: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub history: Vec<PruneRecord>,
    pub baseline_metric: f64,
    /// Index into `history` of the reported (last within-budget) record.
    pub reported: usize,
    /// Model of the reported record.
    pub state: ModelState,
    pub gate: Option<GateConfig>,
    /// Gate statistics of the trained baseline.
    pub baseline_stats: ActivationStats,
    pub trace: Vec<TraceRow>,
}

impl ScheduleOutcome {
    pub fn reported_record(&self) -> &PruneRecord {
        &self.history[self.reported]
    }

    /// Fraction of baseline attention+FFN parameters removed in the reported model.
    pub fn fraction_pruned(&self) -> f64 {
        fraction_pruned(self.history[0].params, self.reported_record().params)
    }
}

pub fn fraction_pruned(baseline: u64, now: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - now as f64 / baseline as f64
    }
}

/// The live blocks a mode reasons about, in `(layer, kind, head)` order.
pub fn candidate_blocks(arch: &Architecture, mode: PruneMode) -> Vec<BlockId> {
    let mut out = Vec::new();
    for (l, layer) in arch.layers.iter().enumerate() {
        match mode.attention_kind() {
            Some(BlockKind::AttentionHead) => out.extend(layer.heads.iter().map(|h| BlockId::head(l, *h))),
            Some(_) if layer.attention_alive() => out.push(BlockId::attention(l)),
            _ => {}
        }
        if mode.targets_ffn() && layer.ffn_alive {
            out.push(BlockId::ffn(l));
        }
    }
    out
}

/// Gate thresholds from the k-th smallest mean max-abs of each targeted kind.
///
/// Kinds that are not targeted, or have fewer than `k` live blocks, get ε = 0.
/// Returns `None` when no targeted kind has `k` live blocks.
pub fn estimate_epsilon(
    stats: &ActivationStats,
    arch: &Architecture,
    k: usize,
    mode: PruneMode,
) -> Result<Option<(f64, f64)>> {
    let mut att = Vec::new();
    let mut ffn = Vec::new();
    for b in candidate_blocks(arch, mode) {
        let m = stats.mean_max_abs(&b)?;
        if b.kind == BlockKind::Ffn {
            ffn.push((m, b));
        } else {
            att.push((m, b));
        }
    }
    let kth = |v: &mut Vec<(f64, BlockId)>| -> Option<f64> {
        // Stable ascending order, ties broken by block order.
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.get(k - 1).map(|x| x.0)
    };
    let (ea, ef) = (kth(&mut att), kth(&mut ffn));
    if ea.is_none() && ef.is_none() {
        return Ok(None);
    }
    Ok(Some((ea.unwrap_or(0.0), ef.unwrap_or(0.0))))
}

/// One evaluation pass collecting gate statistics; parameters are untouched.
pub fn collect_stats(
    state: &ModelState,
    data: &Dataset,
    sn: &SnConfig,
    gate: Option<&GateConfig>,
    granularity: AttentionGating,
) -> Result<ActivationStats> {
    if data.is_empty() {
        return Err(Error::NoData("usage measurement set is empty".into()));
    }
    let mut stats = ActivationStats::new();
    predict(state, data, sn, gate, granularity, Some(&mut stats))?;
    Ok(stats)
}

/// Identity rate of every live block under `gate`.
pub fn measure_usage(
    state: &ModelState,
    data: &Dataset,
    sn: &SnConfig,
    gate: &GateConfig,
) -> Result<BTreeMap<BlockId, f64>> {
    let stats = collect_stats(state, data, sn, Some(gate), gate.attention)?;
    stats.blocks().map(|(b, _)| Ok((*b, stats.identity_rate(b)?))).collect()
}

/// Drops every candidate block whose identity rate is at least `theta`.
pub fn shrink_architecture(
    arch: &Architecture,
    rates: &BTreeMap<BlockId, f64>,
    theta: f64,
    mode: PruneMode,
) -> (Architecture, Vec<BlockId>) {
    let qualifies = |b: &BlockId| rates.get(b).is_some_and(|r| *r >= theta);
    let mut next = arch.clone();
    let mut pruned = Vec::new();
    if mode == PruneMode::WholeLayer {
        for (l, layer) in arch.layers.iter().enumerate() {
            let att = BlockId::attention(l);
            let ffn = BlockId::ffn(l);
            let att_ok = !layer.attention_alive() || qualifies(&att);
            let ffn_ok = !layer.ffn_alive || qualifies(&ffn);
            if (layer.attention_alive() || layer.ffn_alive) && att_ok && ffn_ok {
                for b in [att, ffn] {
                    if arch.is_alive(&b) {
                        next = next.without(&b);
                        pruned.push(b);
                    }
                }
            }
        }
        return (next, pruned);
    }
    for b in candidate_blocks(arch, mode) {
        if qualifies(&b) {
            next = next.without(&b);
            pruned.push(b);
        }
    }
    (next, pruned)
}

fn block_records(
    full: &Architecture,
    arch: &Architecture,
    mode: PruneMode,
    stats: Option<&ActivationStats>,
) -> Vec<BlockRecord> {
    let mut blocks = candidate_blocks(full, PruneMode::SingleHeadAndFfn);
    if mode.granularity() == AttentionGating::PerLayer {
        blocks = candidate_blocks(full, PruneMode::WholeLayer);
    }
    blocks
        .into_iter()
        .map(|b| {
            let alive = arch.is_alive(&b);
            let s = stats.filter(|_| alive);
            BlockRecord {
                block: b,
                alive,
                identity_rate: s.and_then(|s| s.identity_rate(&b).ok()),
                mean_max_abs: s.and_then(|s| s.mean_max_abs(&b).ok()),
            }
        })
        .collect()
}

/// Mutable driver state of a schedule.
#[derive(Clone, Debug)]
pub struct PruneState {
    pub model: ModelState,
    pub gate: Option<GateConfig>,
    pub iteration: usize,
    pub baseline_metric: f64,
    pub history: Vec<PruneRecord>,
    pub trace: Vec<TraceRow>,
    full_arch: Architecture,
}

impl PruneState {
    fn settings(&self, cfg: &ScheduleConfig, epochs: usize, l1: f64, phase: u64) -> TrainSettings {
        TrainSettings {
            optimizer: cfg.optimizer.clone(),
            sn: cfg.sn.clone(),
            l1_factor: l1,
            gate: self.gate,
            granularity: cfg.prune.mode.granularity(),
            epochs,
            seed: cfg.seed ^ phase.wrapping_mul(0x2545_f491_4f6c_dd1d),
        }
    }

    fn record(
        &self,
        cfg: &ScheduleConfig,
        train: &Dataset,
        eval: &Dataset,
        usage: Option<&ActivationStats>,
        pruned: Vec<BlockId>,
        note: RecordNote,
    ) -> Result<PruneRecord> {
        let gran = cfg.prune.mode.granularity();
        let m = &self.model;
        Ok(PruneRecord {
            iteration: self.iteration,
            eps_att: self.gate.as_ref().map_or(0.0, |g| g.eps_att),
            eps_ffn: self.gate.as_ref().map_or(0.0, |g| g.eps_ffn),
            pruned,
            params: count_params(&m.config, &m.arch),
            flops: count_flops(&m.config, &m.arch, m.config.max_seq_len),
            train_metric: evaluate(m, train, &cfg.sn, self.gate.as_ref(), gran)?,
            eval_metric: evaluate(m, eval, &cfg.sn, self.gate.as_ref(), gran)?,
            blocks: block_records(&self.full_arch, &m.arch, cfg.prune.mode, usage),
            note,
            arch: m.arch.clone(),
        })
    }
}

/// Trains the ungated baseline and returns the initial schedule state.
pub fn train_baseline(cfg: &ScheduleConfig, train: &Dataset, eval: &Dataset) -> Result<(PruneState, ActivationStats)> {
    cfg.model.validate()?;
    cfg.prune.validate()?;
    cfg.optimizer.validate()?;
    let model = ModelState::new(cfg.model.clone(), cfg.seed)?;
    let full_arch = model.arch.clone();
    let mut st = PruneState {
        model,
        gate: None,
        iteration: 0,
        baseline_metric: 0.0,
        history: Vec::new(),
        trace: Vec::new(),
        full_arch,
    };
    let settings = st.settings(cfg, cfg.prune.train_epochs, 0.0, 0);
    let out = train_phase(&mut st.model, train, &settings)?;
    st.trace.extend(out.trace);
    let gran = cfg.prune.mode.granularity();
    let stats = collect_stats(&st.model, train, &cfg.sn, None, gran)?;
    let rec = st.record(cfg, train, eval, Some(&stats), Vec::new(), RecordNote::Baseline)?;
    st.baseline_metric = rec.eval_metric;
    st.history.push(rec);
    Ok((st, stats))
}

/// One greedy iteration: estimate ε, train with the prior, measure usage,
/// remove blocks at or above θ and retrain the survivors with ε frozen.
pub fn prune_iteration(st: &mut PruneState, cfg: &ScheduleConfig, train: &Dataset, eval: &Dataset) -> Result<RecordNote> {
    let mode = cfg.prune.mode;
    let gran = mode.granularity();
    st.iteration += 1;
    let phase = 2 * st.iteration as u64;

    let stats = collect_stats(&st.model, train, &cfg.sn, st.gate.as_ref(), gran)?;
    let Some((eps_att, eps_ffn)) = estimate_epsilon(&stats, &st.model.arch, cfg.prune.k, mode)? else {
        let rec = st.record(cfg, train, eval, Some(&stats), Vec::new(), RecordNote::Exhausted)?;
        st.history.push(rec);
        return Ok(RecordNote::Exhausted);
    };
    st.gate = Some(GateConfig {
        eps_att,
        eps_ffn,
        sharpness: cfg.sharpness,
        attention: gran,
    });

    let settings = st.settings(cfg, cfg.prune.prior_epochs, cfg.prune.l1_factor, phase);
    let out = train_phase(&mut st.model, train, &settings)?;
    st.trace.extend(out.trace);

    let gate = st.gate.expect("gate set above");
    let usage = collect_stats(&st.model, train, &cfg.sn, Some(&gate), gran)?;
    let rates: BTreeMap<BlockId, f64> = usage
        .blocks()
        .map(|(b, _)| Ok((*b, usage.identity_rate(b)?)))
        .collect::<Result<_>>()?;
    let (arch, pruned) = shrink_architecture(&st.model.arch, &rates, cfg.prune.theta, mode);
    let note = if pruned.is_empty() {
        RecordNote::Null
    } else {
        st.model.apply_architecture(arch);
        RecordNote::Pruned
    };
    if cfg.prune.retrain_epochs > 0 {
        let settings = st.settings(cfg, cfg.prune.retrain_epochs, 0.0, phase + 1);
        let out = train_phase(&mut st.model, train, &settings)?;
        st.trace.extend(out.trace);
    }
    let mut rec = st.record(cfg, train, eval, Some(&usage), pruned, note)?;
    if rec.eval_metric < st.baseline_metric - cfg.prune.accuracy_budget {
        rec.note = RecordNote::OverBudget;
    }
    let note = rec.note;
    st.history.push(rec);
    Ok(note)
}

/// Baseline training followed by pruning iterations until the budget is
/// exceeded, `max_iterations` is reached or nothing is left to prune.
pub fn run_schedule(cfg: &ScheduleConfig, train: &Dataset, eval: &Dataset) -> Result<ScheduleOutcome> {
    let (mut st, baseline_stats) = train_baseline(cfg, train, eval)?;
    let mut reported = (0, st.model.clone(), st.gate);
    while st.iteration < cfg.prune.max_iterations {
        match prune_iteration(&mut st, cfg, train, eval)? {
            RecordNote::OverBudget | RecordNote::Exhausted => break,
            _ => reported = (st.history.len() - 1, st.model.clone(), st.gate),
        }
    }
    Ok(ScheduleOutcome {
        baseline_metric: st.baseline_metric,
        history: st.history,
        reported: reported.0,
        state: reported.1,
        gate: reported.2,
        baseline_stats,
        trace: st.trace,
    })
}
