//! Objectives, optimizer, schedule and the training loops.

mod config;
mod losses;
mod optim;
mod runner;

pub use config::TrainConfig;
pub use losses::{argmax, argmax_accuracy, mlm_loss, vtc_loss, vtm_loss};
pub use optim::{adamw_step, global_norm, lr_at, AdamState};
pub use runner::{
    finetune_retrieval, pretrain, tokenize_captions, train, weighted_sum, MetricRow, RetrievalObjective, TrainOutcome,
};
