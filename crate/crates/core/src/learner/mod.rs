//! Score learning: the residual MLP, hinge objective, pseudo-negative
//! augmentation, hand-written backprop, AdamW and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod train;

pub use augment::{gaussian_augment, AugmentConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport, GradCheckSpec};
pub use loss::{hinge_loss, LossConfig, LossTerms};
pub use mlp::{MlpParams, Phase};
pub use model::{ModelGrads, ModelParams, ParamGroup, PatchSet};
pub use optim::{OptimizerConfig, OptimizerState};
pub use train::{train, write_loss_log, LossLogRow, TrainConfig, TrainSetup, TrainingData};
