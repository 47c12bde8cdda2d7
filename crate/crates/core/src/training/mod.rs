//! Losses, optimizer, the alternating training loop and checkpoints.

pub mod checkpoint;
pub mod losses;
pub mod optim;
mod train;

pub use checkpoint::CheckpointMeta;
pub use losses::{kl_distill, kl_distill_with, kl_rows, loss_d, loss_g, LossReport};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use train::{g_objective, train, EpochRecord, TrainConfig, TrainOutcome, Trainer};
