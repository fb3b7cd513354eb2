//! Desk-scale supervised training.

pub mod data;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use data::SynthDataset;
pub use loss::{accuracy, cross_entropy};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, OptimState};
pub use trainer::{evaluate, history_csv, loss_and_grads, train_loop, StepMetrics, TrainConfig, TrainOutcome};
