//! Greedy iterative structured pruning with identity-inducing gates.

mod config;
mod engine;
mod optim;
mod state;
mod train;

pub use config::{PruneConfig, PruneMode};
pub use engine::{
    candidate_blocks, collect_stats, estimate_epsilon, fraction_pruned, measure_usage, prune_iteration, run_schedule,
    shrink_architecture, train_baseline, BlockRecord, PruneRecord, PruneState, RecordNote, ScheduleConfig,
    ScheduleOutcome,
};
pub use optim::{learning_rate_at, Optimizer, OptimizerConfig, OptimizerKind};
pub use state::{ModelState, SnConfig};
pub use train::{argmax_rows, evaluate, predict, train_phase, PhaseOutcome, TrainSettings};
