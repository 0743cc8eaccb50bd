//! Partially labeled training: per-class image pool, BCE + soft-Dice loss,
//! Adam, validation and VM/VH checkpoint selection.

pub mod loss;
pub mod optim;
pub mod pool;
pub mod trainer;

pub use loss::{loss_from_logits, partial_loss};
pub use optim::{Adam, AdamConfig};
pub use pool::{EmitRule, ImagePool, LeftoverPolicy, PoolConfig, PoolStats};
pub use trainer::{
    batch_gradients, select_checkpoint, train, train_dice, train_epoch, validate, Augmentation,
    EpochRecord, EpochStats, KeepPolicy, SelectionCriterion, TrainState, TrainingConfig,
    TrainingHistory, ValidationScores,
};
