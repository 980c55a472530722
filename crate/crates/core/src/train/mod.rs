//! Losses, optimiser, EMA and the two-stage trainer.

pub mod battery;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use loss::{LossConfig, TcmBatch, Weighting};
pub use optim::{Adam, Ema, LrSchedule};
pub use trainer::{
    train_stage1, train_stage2, write_log_csv, LogRow, Snapshot, TrainOutput, LOG_HEADER,
};
