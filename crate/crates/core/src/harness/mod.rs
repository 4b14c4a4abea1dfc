//! Experiment orchestration: configuration, deterministic batch schedules,
//! the training protocol (lower bound, upper bounds, semi-supervised
//! fine-tuning), evaluation and CSV reporting.
//!
//! Every experiment is a pure function of (config, seeds, datasets):
//! re-running produces identical CSVs and checkpoints.

mod config;
mod eval;
mod loader;
mod priors;
mod sweep;
mod train;

pub use config::ExperimentConfig;
pub use priors::{build_noisy_prior, load_domain_prior, save_domain_prior, DomainPrior};
pub use eval::{evaluate, f_score_counts, mean_f_score, read_csv, spearman_rho, write_csv, MetricsRow, CSV_HEADER};
pub use loader::{mixed_batches, supervised_batches, union_batches, MixedBatch, UnionItem};
pub use sweep::{
    jsd_diag, mean_jsd_by_ne, run_sweep, sweep_cells, sweep_model_id, write_jsd_csv, JsdRow, SeedFixture, SweepCell,
};
pub use train::{
    dice_training_step, finetune_semisupervised, semi_supervised_step, train_lower_bound, train_lower_bounds,
    train_upper_bound, PriorKind, TargetSet, TrainRun,
};
