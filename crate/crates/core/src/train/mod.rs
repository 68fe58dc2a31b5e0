//! Optimisation, evaluation and checkpointing.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;
mod trainer;

pub use checkpoint::Checkpoint;
pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::Schedule;
pub use trainer::{confusion, evaluate, train, LogRecord, TrainConfig, TrainReport, FINAL_LOSS_WINDOW};
