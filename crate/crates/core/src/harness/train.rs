use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// SGD with momentum on softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the gradient when its global L2 norm exceeds this; 0 disables.
    pub grad_clip: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            grad_clip: 5.0,
            cosine: true,
        }
    }
}

/// One line of run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Held-out accuracy when an evaluation set is given, otherwise
    /// accuracy on the training batches as they were seen.
    pub top1: f64,
    pub top5: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Rank of the true class among `row`: the number of classes that beat it,
/// where a tie goes to the lower index.
fn rank_of(row: &[f64], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Top-1 and top-5 accuracy of `N×K` logits.
pub fn topk_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Accuracy {
    let k = logits.shape()[1];
    let mut hits = [0usize; 2];
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let r = rank_of(&row, l);
        hits[0] += (r < 1) as usize;
        hits[1] += (r < 5) as usize;
    }
    let n = labels.len();
    Accuracy {
        top1: hits[0] as f64 / n.max(1) as f64,
        top5: hits[1] as f64 / n.max(1) as f64,
        n,
    }
}

fn check_classes<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let k = model.config().num_classes;
    if let Some(&l) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dataset(format!(
            "label {l} out of range for a {k}-class model"
        )));
    }
    if k != data.task.num_classes() {
        return Err(Error::Dataset(format!(
            "model has {k} classes, task {} has {}",
            data.task.name(),
            data.task.num_classes()
        )));
    }
    Ok(())
}

/// Single-clip accuracy over `data`, in fixed-size batches.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Accuracy> {
    check_classes(model, data)?;
    let mut hits = [0.0; 2];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk);
        let a = topk_accuracy(&model.forward(&x)?, &y);
        hits[0] += a.top1 * a.n as f64;
        hits[1] += a.top5 * a.n as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(Accuracy {
        top1: hits[0] / n,
        top5: hits[1] / n,
        n: data.len(),
    })
}

/// Trains in place and returns the per-epoch history. `on_epoch` sees each
/// record as soon as it exists.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    check_classes(model, data)?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Dataset("empty dataset or zero batch size".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut velocity: Vec<Tensor<T>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    let (mu, wd) = (T::of(cfg.momentum), T::of(cfg.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, [0.0; 2], 0usize);
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch::<T>(chunk);
            let mut g = model.graph();
            let xv = g.input(x);
            let logits = model.forward_on(&mut g, xv)?;
            let loss_v = g.cross_entropy(logits, &y)?;
            let loss = g.value(loss_v).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: s,
                    loss,
                });
            }
            let a = topk_accuracy(g.value(logits), &y);
            let grads = g.backward(loss_v)?.params(&g);
            drop(g);

            let norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: s,
                    loss: norm,
                });
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            let lr = if cfg.cosine {
                0.5 * cfg.lr
                    * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.lr
            };
            let (lr, clip) = (T::of(lr), T::of(clip));
            for ((p, v), gr) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, m), &dg) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *m = mu * *m + dg * clip + wd * *w;
                    *w = *w - lr * *m;
                }
            }
            step += 1;
            loss_sum += loss * chunk.len() as f64;
            hits[0] += a.top1 * a.n as f64;
            hits[1] += a.top5 * a.n as f64;
            seen += chunk.len();
        }
        let (top1, top5) = match eval {
            Some(ev) => {
                let a = evaluate(model, ev, cfg.batch_size)?;
                (a.top1, a.top5)
            }
            None => (hits[0] / seen as f64, hits[1] / seen as f64),
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            top1,
            top5,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}
