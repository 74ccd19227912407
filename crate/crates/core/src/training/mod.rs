//! Optimization loop with per-block gradient instrumentation.

mod optim;
mod stats;
mod trainer;

pub use optim::{AdamWConfig, OptimState};
pub use stats::{ema_update, grad_block_magnitudes, population_std, total_grad_norm, windowed_means, GradStats};
pub use trainer::{grad_std_profile, sample_batch, train_step, Batch, StepRecord, TrainConfig, Trainer, INIT_STREAM};
