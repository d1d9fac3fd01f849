//! Training with USN regularisation and scheduled structured pruning.

pub mod objective;
pub mod optim;
pub mod pruning;
pub mod schedule;
pub mod train;

pub use objective::{evaluate_objective, total_loss, BatchItem, LayerTerms, LossWeights, ObjectiveValue};
pub use optim::{Optimizer, OptimizerConfig};
pub use pruning::{kept_count, prune_step, random_prune_baseline, select_keep, ImportanceTracker, PruneOrder, PruneOutcome};
pub use schedule::PruningSchedule;
pub use train::{cnn_small, task_loss, train, EpochLog, PruningMode, TrainConfig, TrainOutcome};
