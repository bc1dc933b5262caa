//! Training, evaluation and the strategy grid.

pub mod ablation;
pub mod adamw;
pub mod config;
pub mod eval;
pub mod train;

pub use ablation::{ablation_grid, ablation_table, load_base, run_ablation, AblationRow};
pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use config::{parse_key_values, RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_samples, transcribe};
pub use train::{fine_tune, prepare_samples, pretrain, train, EpochLog, Sample, TrainOutcome};
