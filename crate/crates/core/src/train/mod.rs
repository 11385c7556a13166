//! Fine-tuning, persistence and the ablation protocols.

pub mod ablation;
pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use metrics::{MetricsLog, StepRecord};
pub use optim::AdamW;
pub use schedule::lr_schedule;
pub use trainer::{classification_accuracy, evaluate, train, train_classifier, EncoderAdapter, TrainConfig, TrainOutcome};
