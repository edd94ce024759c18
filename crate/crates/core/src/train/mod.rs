//! Training schedule, configuration and checkpoints.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{SamplerKind, TrainConfig};
pub use trainer::{train, LossRecord, TrainError, Trainer};
