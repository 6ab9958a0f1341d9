//! Losses, optimizer, learning-rate schedule and the training loop.

mod config;
mod loss;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use loss::{label_smoothed_ce, multiresolution_loss};
pub use optim::{clip_grad_norm, grad_norm, lr_schedule, AdamConfig, AdamState, Schedule, StepOutcome};
pub use trainer::{
    EpochRecord, FitReport, LossBreakdown, Progress, StepStats, StopReason, Trainer, METRICS_HEADER,
};
