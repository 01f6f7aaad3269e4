//! Desk-scale experiments: synthetic video tasks, training, single-clip
//! evaluation and gradient checking.

pub mod data;
mod experiment;
mod gradcheck;
mod train;

pub use data::{
    derive_label, gen_clip, gen_dataset, gen_dataset_range, Dataset, SyntheticClip, Task,
};
pub use experiment::{Experiment, RunResult, HELD_OUT_OFFSET};
pub use gradcheck::{
    gradcheck, gradcheck_config, GradCheckReport, GroupResult, ParamGroup, GRAD_FLOOR, STEP,
};
pub use train::{evaluate, topk_accuracy, train, Accuracy, EpochRecord, TrainConfig};
