//! Optimisation: Adam, the learning-rate schedule, freeze policies,
//! checkpoints and the training loop.

mod checkpoint;
mod freeze;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use freeze::FreezePolicy;
pub use optim::{adam_step, clip_grads, grad_norm, AdamConfig, Moments, OptimizerState};
pub use schedule::{lr_at, Schedule};
pub use trainer::{
    train, Objective, RunReport, StepRecord, TrainConfig, TrainItem, TrainOptions, Trainer,
};
