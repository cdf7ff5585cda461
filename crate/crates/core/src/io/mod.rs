//! Configuration files, checkpoints and CSV reports.

mod checkpoint;
mod config;
mod lock;
mod reports;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{parse_config, ModelSection, RunConfig, RESOLVED_CONFIG_FILE};
pub use lock::{OutputLock, LOCK_FILE};
pub use reports::{
    emit_reports, table_row, write_norm_hist, write_prune_curve, write_prune_map, write_spectral_trace,
    write_summary, RunHistory, HISTORY, NORM_HIST, PRUNE_CURVE, PRUNE_MAP, REPORT_FILES, SPECTRAL_TRACE, SUMMARY,
};
