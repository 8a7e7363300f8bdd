//! Optimisation loop: AdamW, warmup plus cosine schedule, clipping,
//! periodic evaluation, gate snapshots and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, Progress};
pub use optim::{clip_global_norm, AdamW};
pub use schedule::{lr_at, TrainConfig};
pub use train::{evaluate, gate_snapshots, GateSnapshot, MetricsRow, TrainObserver, TrainOutcome, Trainer};
