//! Two-stage occupancy network: a generative completion U-Net and a
//! segmentation U-Net, with their losses and the training step.

mod config;
pub mod gradcheck;
pub mod loss;
mod model;
mod stats;
mod trainer;

pub use config::ModelConfig;
pub use loss::{cb_weight, class_balanced_ce, completion_loss, segmentation_targets, total_loss, total_loss_value};
pub use model::{CompletionOutput, GtPyramid, LevelOutput, Network};
pub use stats::{ClassStats, FREQ_FLOOR};
pub use trainer::{
    batch_inputs, densify, evaluate, forward_losses, infer_sparse, predict, prepare_example, EarlyStopping, Example,
    Prediction, StepLosses, Trainer,
};

#[cfg(test)]
mod tests;
