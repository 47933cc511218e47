//! Domain-adversarially invariant meta-learning of the residual-force basis.

mod lsq;
mod train;

pub use lsq::{least_squares_adapt, AdaptSolution, LsAdaptation, LsError};
pub use train::{
    adaptation_loss, meta_gradient, train, train_with_observer, DaimlConfig, DaimlError, EpochRecord, MetaStep,
    TrainedModel, TrainingLog,
};
