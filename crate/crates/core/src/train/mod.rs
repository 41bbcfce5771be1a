//! Training harness: distillation loss, AdamW, datasets, checkpoints and the
//! two-step training loop.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod loss;
pub mod optim;

pub use checkpoint::{write_atomic, Manifest, CHECKPOINT_SCHEMA};
pub use data::{Dataset, DatasetFormat, DatasetSource, Normalization};
pub use engine::{evaluate, train_epoch, train_stage, EpochLog, Init, MetricAccumulator, Metrics, Stage, TrainConfig, TrainState};
pub use loss::{kd_loss, KdLossConfig};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
