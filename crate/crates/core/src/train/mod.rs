//! Losses, optimizer, metric suite, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use loss::{loss, loss_node};
pub use metrics::{auc, metrics, pcc, r2, rmse, LenientMetrics, Metrics, MetricsReport};
pub use trainer::{mean_loss, predict_all, train, EpochRecord, TrainConfig, TrainOutcome};
