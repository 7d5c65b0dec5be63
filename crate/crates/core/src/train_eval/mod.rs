//! Training, prediction, evaluation and checkpointing.

mod adam;
mod checkpoint;
mod metrics;
mod predict;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to, Checkpoint, FSCK_MAGIC, FSCK_VERSION,
};
pub use metrics::{evaluate_miou, ConfusionMatrix, MetricsReport};
pub use predict::{
    copy_last_baseline, evaluate_copy_last, evaluate_model, predict_autoregressive, predict_one_step, windows,
    EvalOptions,
};
pub use train::{train, train_with, EpochMetrics, TrainConfig, TrainOutcome};
