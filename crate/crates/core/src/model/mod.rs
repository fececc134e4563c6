//! Toy-scale model: assembly, training, the forgetting experiment and a
//! gradient check.

pub mod config;
pub mod forget;
pub mod gradcheck;
pub mod network;
pub mod task;
pub mod train;

pub use config::{GemConfig, TrainConfig};
pub use forget::{forgetting_experiment, reference_task_pair, ForgettingReport, ForgettingSetup};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, GradCheckStatus};
pub use network::{Checkpoint, ForwardOutput, GemModel, Param, PathwayPlan};
pub use task::{Sample, SyntheticTask, TaskSpec};
pub use train::{distill_loss, evaluate, train, train_step, AdamW, EpochStats};
