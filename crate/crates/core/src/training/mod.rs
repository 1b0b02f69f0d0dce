//! Teacher-forced training with size-grouped mini-batches, early stopping
//! on validation NDCG@10, and checkpoint files.

mod batch;
mod checkpoint;
mod config;
mod fit;
pub(crate) mod forcing;
mod step;

pub use batch::{plan_batches, train_sessions, Batch, BatchPlan, SessionRef};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint,
    save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use fit::{fit, fit_with, history_csv, train_epoch, EpochRecord, FitOutcome};
pub use forcing::teacher_force_next;
pub use step::{predicted_item, run_training_step, Optimizers, StepStats};

#[cfg(test)]
mod tests;
