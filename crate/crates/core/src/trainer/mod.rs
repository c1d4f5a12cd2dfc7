//! Staged training with simulated data-parallel shards.

mod checkpoint;
mod optim;
mod shard;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adam_update, AdamConfig, OptimizerState};
pub use shard::{all_reduce_grads, gather_shards, split_batch, ShardContext};
pub use train::{
    compute_gradients, run_stage, short_hash, train_step, training_pairs, write_loss_curve, EpochLoss,
    PairSide, Stage, StageInit, StageReport, StepGradients, StepLosses, StepOutcome,
    TeacherCache, TrainConfig, TrainPair,
};
