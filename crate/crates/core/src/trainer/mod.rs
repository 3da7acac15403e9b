//! Loss, optimizers, K-fold training with out-of-fold scoring,
//! checkpoints and the two comparison experiments.

mod checkpoint;
mod config;
mod experiment;
mod kfold;
mod loss;
mod optim;

pub use checkpoint::{Checkpoint, LoadReport, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, OptimizerKind, PipelineConfig, TrainConfig};
pub use experiment::{pretrain_backbone, pretraining_source, run_experiment, ArmOutcome, ExperimentKind, ExperimentReport};
pub use kfold::{
    evaluate, model_image_size, train_full, train_kfold, write_epoch_csv, EpochStats, FoldOutcome, KFoldOutcome,
    OofPrediction, Split, EPOCH_COLUMNS,
};
pub use loss::{cross_entropy_loss, LOG_FLOOR};
pub use optim::{Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, SGD_MOMENTUM};
