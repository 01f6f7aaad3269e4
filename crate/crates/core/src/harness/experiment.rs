use serde::{Deserialize, Serialize};

use super::data::{gen_dataset, gen_dataset_range, Dataset, Task};
use super::train::{evaluate, train, Accuracy, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// First clip index of the held-out split. The training split counts up
/// from 0, so the two never overlap, and the offset is a multiple of every
/// task's class count, so the split stays balanced.
pub const HELD_OUT_OFFSET: usize = 1 << 20;

/// A train-then-evaluate run on one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub task: Task,
    pub train_size: usize,
    pub eval_size: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            train_size: 384,
            eval_size: 256,
            data_seed: 11,
            train: TrainConfig::default(),
        }
    }

    /// The model config with the task's class count and a clip shape taken
    /// from `cfg`.
    pub fn fit_config(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            num_classes: self.task.num_classes(),
            ..cfg.clone()
        }
    }

    pub fn train_split(&self, cfg: &ModelConfig) -> Result<Dataset> {
        let r = cfg.resolution;
        gen_dataset(self.task, self.train_size, cfg.frames, r, r, self.data_seed)
    }

    pub fn held_out_split(&self, cfg: &ModelConfig) -> Result<Dataset> {
        let r = cfg.resolution;
        gen_dataset_range(
            self.task,
            HELD_OUT_OFFSET,
            self.eval_size,
            cfg.frames,
            r,
            r,
            self.data_seed,
        )
    }

    /// Builds a model from `cfg` with `init_seed`, trains it on the
    /// training split and scores it on the held-out split.
    pub fn run(
        &self,
        cfg: &ModelConfig,
        init_seed: u64,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<RunResult> {
        if cfg.num_classes != self.task.num_classes() {
            return Err(Error::Dataset(format!(
                "model has {} classes, task {} has {}",
                cfg.num_classes,
                self.task.name(),
                self.task.num_classes()
            )));
        }
        let train_set = self.train_split(cfg)?;
        let eval_set = self.held_out_split(cfg)?;
        let mut model = Model::<f32>::build(cfg, init_seed)?;
        let history = train(&mut model, &train_set, None, &self.train, on_epoch)?;
        let accuracy = evaluate(&model, &eval_set, self.train.batch_size)?;
        Ok(RunResult {
            model,
            history,
            accuracy,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub accuracy: Accuracy,
}
