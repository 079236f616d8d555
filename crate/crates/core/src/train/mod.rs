//! Training harness: byte tokenizer, config files, optimizer and schedule,
//! the training loop, evaluation, generation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{evaluate, generate, generate_ids, EvalReport};
pub use trainer::{StepMetrics, Trainer};
