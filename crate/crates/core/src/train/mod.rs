//! Supervised identity-classification training.

mod augment;
mod config;
mod fit;
mod sgd;

pub use augment::{augment, flip_horizontal, preprocess, sample_erase_rect, AugmentConfig, Augmented, EraseRect};
pub use config::{lr_at, LearningRates, TrainConfig};
pub use fit::{classification_accuracy, epoch_order, sample_rng, train, EpochLog, TrainOutcome};
pub use sgd::{sgd_step, OptimizerState};
