//! CSV reports. Every float is written with six decimals so identical runs
//! produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{ActivationStats, BlockId, BlockStats};
use crate::pruning::{fraction_pruned, PruneRecord, ScheduleOutcome};
use crate::spectral::TraceRow;

pub const PRUNE_CURVE: &str = "prune_curve.csv";
pub const PRUNE_MAP: &str = "prune_map.csv";
pub const NORM_HIST: &str = "norm_hist.csv";
pub const SPECTRAL_TRACE: &str = "spectral_trace.csv";
pub const SUMMARY: &str = "summary.csv";
pub const HISTORY: &str = "history.json";

pub const REPORT_FILES: [&str; 5] = [PRUNE_CURVE, PRUNE_MAP, NORM_HIST, SPECTRAL_TRACE, SUMMARY];

/// Everything needed to regenerate the CSV reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<PruneRecord>,
    pub reported: usize,
    pub baseline_metric: f64,
    pub baseline_stats: Vec<(BlockId, BlockStats)>,
    pub trace: Vec<TraceRow>,
}

impl RunHistory {
    pub fn from_outcome(out: &ScheduleOutcome) -> Self {
        Self {
            records: out.history.clone(),
            reported: out.reported,
            baseline_metric: out.baseline_metric,
            baseline_stats: out.baseline_stats.clone().into(),
            trace: out.trace.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Report(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Report(format!("bad history file {}: {e}", path.display())))
    }
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map(f6).unwrap_or_default()
}

fn writer(dir: &Path, name: &str) -> Result<(csv::Writer<std::fs::File>, PathBuf)> {
    let path = dir.join(name);
    let w = csv::Writer::from_path(&path).map_err(csv_err)?;
    Ok((w, path))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Report(format!("{other:?}")),
    }
}

pub fn write_prune_curve(records: &[PruneRecord], dir: &Path) -> Result<PathBuf> {
    let (mut w, path) = writer(dir, PRUNE_CURVE)?;
    w.write_record([
        "iteration",
        "eps_att",
        "eps_ffn",
        "params",
        "flops",
        "pct_params_pruned",
        "train_metric",
        "eval_metric",
    ])
    .map_err(csv_err)?;
    let base = records.first().map_or(0, |r| r.params);
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            f6(r.eps_att),
            f6(r.eps_ffn),
            r.params.to_string(),
            r.flops.to_string(),
            f6(100.0 * fraction_pruned(base, r.params)),
            f6(r.train_metric),
            f6(r.eval_metric),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

pub fn write_prune_map(records: &[PruneRecord], dir: &Path) -> Result<PathBuf> {
    let (mut w, path) = writer(dir, PRUNE_MAP)?;
    w.write_record(["iteration", "layer", "kind", "head_index", "alive", "identity_rate", "mean_maxabs"])
        .map_err(csv_err)?;
    for r in records {
        for b in &r.blocks {
            w.write_record([
                r.iteration.to_string(),
                b.block.layer.to_string(),
                b.block.kind.as_str().to_string(),
                b.block.head.map(|h| h.to_string()).unwrap_or_default(),
                u8::from(b.alive).to_string(),
                opt6(b.identity_rate),
                opt6(b.mean_max_abs),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(path)
}

pub fn write_norm_hist(stats: &ActivationStats, dir: &Path) -> Result<PathBuf> {
    let (mut w, path) = writer(dir, NORM_HIST)?;
    w.write_record(["block", "bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    for (block, _) in stats.blocks() {
        for bin in stats.histogram(block) {
            w.write_record([block.to_string(), f6(bin.lo), f6(bin.hi), bin.count.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(path)
}

pub fn write_spectral_trace(trace: &[TraceRow], dir: &Path) -> Result<PathBuf> {
    let (mut w, path) = writer(dir, SPECTRAL_TRACE)?;
    w.write_record(["step", "layer", "matrix", "sigma"]).map_err(csv_err)?;
    for t in trace {
        w.write_record([t.step.to_string(), t.layer.to_string(), t.matrix.clone(), f6(t.sigma)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

/// `-X%/metric` in the style of a compression table row.
pub fn table_row(fraction: f64, metric: f64) -> String {
    format!("-{:.1}%/{:.1}", 100.0 * fraction, 100.0 * metric)
}

pub fn write_summary(h: &RunHistory, dir: &Path) -> Result<PathBuf> {
    let base = h.records.first().ok_or_else(|| Error::Report("empty history".into()))?;
    let rep = h
        .records
        .get(h.reported)
        .ok_or_else(|| Error::Report(format!("reported index {} out of range", h.reported)))?;
    let frac = fraction_pruned(base.params, rep.params);
    let (mut w, path) = writer(dir, SUMMARY)?;
    w.write_record([
        "iteration",
        "pct_params_pruned",
        "eval_metric",
        "baseline_metric",
        "params",
        "baseline_params",
        "flops",
        "architecture",
        "table_row",
    ])
    .map_err(csv_err)?;
    w.write_record([
        rep.iteration.to_string(),
        f6(100.0 * frac),
        f6(rep.eval_metric),
        f6(h.baseline_metric),
        rep.params.to_string(),
        base.params.to_string(),
        rep.flops.to_string(),
        rep.arch.describe(),
        table_row(frac, rep.eval_metric),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(path)
}

/// Writes all five CSV reports into `dir`.
pub fn emit_reports(h: &RunHistory, dir: &Path) -> Result<Vec<PathBuf>> {
    if h.records.is_empty() {
        return Err(Error::Report("empty history".into()));
    }
    let stats = ActivationStats::from(h.baseline_stats.clone());
    Ok(vec![
        write_prune_curve(&h.records, dir)?,
        write_prune_map(&h.records, dir)?,
        write_norm_hist(&stats, dir)?,
        write_spectral_trace(&h.trace, dir)?,
        write_summary(h, dir)?,
    ])
}
