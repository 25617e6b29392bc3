//! Synthetic task, training loop, factor sweeps and their statistics.

pub mod data;
pub mod stats;
pub mod sweep;
pub mod train;

pub use data::{gen_synthetic, Sample, SizeBand, SizeBands, SyntheticTask, TaskConfig};
pub use stats::{median, pearson, stratified_metrics, StratifiedMetrics};
pub use sweep::{run_sweep, Factor, SweepBase, SweepFailure, SweepRecord};
pub use train::{evaluate, train, EvalPoint, Optimizer, TrainConfig, TrainHistory};
