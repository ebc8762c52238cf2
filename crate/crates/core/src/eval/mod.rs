//! Task metrics, score normalizations and the fine-tuning harness.

mod finetune;
mod metrics;

pub use finetune::{evaluate, finetune, predict, EpochRecord, Example, FinetuneConfig, LossKind, Target};
pub use metrics::{
    improvement, metric_acc, metric_auc, metric_f1, metric_mae, metric_mse, metric_rmse, minmax_norm, percentage, signed_norm,
    Direction, EvalBatch, F1Average, Flagged, SignedNorm, TaskKind,
};
