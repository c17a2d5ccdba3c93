//! Losses, the supervised trainer and the meta pseudo-label trainer.

mod loss;
mod meta;
mod toy;

pub use loss::{
    graph_loss, loss_report, mse_loss, shift_targets, similarity_weights, softmax, weighted_mse, window_weights,
    LossReport,
};
pub use meta::{
    labeled_subset, meta_step, meta_train, teacher_feedback, Feedback, LabeledLoss, Learner, MetaConfig, MetaDiagnostics, MetaState,
};
pub use toy::{LinearToy, ToyBatch};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::time_major_batch;
use crate::error::{Error, Result};
use crate::evaluation::{forecast_stats, to_db_floor};
use crate::network::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::params::flat_norm;
use crate::tensor::{Graph, Real, Tensor};

mod defaults {
    pub fn iters() -> usize {
        10_000
    }
    pub fn batch() -> usize {
        8
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn val_every() -> usize {
        100
    }
}

/// Supervised schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::iters")]
    pub iters: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Validation period in iterations; 0 disables validation.
    #[serde(default = "defaults::val_every")]
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: defaults::iters(),
            batch: defaults::batch(),
            lr: defaults::lr(),
            seed: 0,
            val_every: defaults::val_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config(format!("{path}/batch"), "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{path}/lr"), format!("must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of a training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub total: f64,
    pub ape_free: f64,
    pub ape: f64,
    /// The optimized loss (weighted when the adaptive scheme is on).
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nmse_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_val_nmse_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_unlabeled_loss: Option<f64>,
}

/// Epoch-wise shuffled minibatch indices.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// A time-major batch `[L, B, ...]` together with its horizon split.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch<T: Real = f32> {
    pub frames: Tensor<T>,
    pub j: usize,
    pub k: usize,
}

impl SeqBatch<f32> {
    pub fn gather(windows: &[Tensor<f32>], idx: &[usize], j: usize, k: usize) -> Result<Self> {
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &windows[i]).collect();
        Ok(SeqBatch {
            frames: time_major_batch(&refs)?,
            j,
            k,
        })
    }
}

/// Outcome of one labeled forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOutcome<T: Real> {
    pub report: LossReport,
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Loss against the batch's own future frames and its gradients.
    pub fn labeled_step(&self, batch: &SeqBatch<T>, weighted: bool) -> Result<StepOutcome<T>> {
        let targets = shift_targets(&batch.frames)?;
        let weights = weighted.then(|| similarity_weights(&batch.frames));
        self.target_step(batch, &targets, weights.as_deref())
    }

    /// Loss against explicit aligned `targets` `[L − 1, B, ...]`.
    pub fn target_step(
        &self,
        batch: &SeqBatch<T>,
        targets: &Tensor<T>,
        weights: Option<&[Vec<f64>]>,
    ) -> Result<StepOutcome<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let preds = self.rollout(&mut g, &p, &batch.frames, batch.j, batch.k)?;
        let loss = graph_loss(&mut g, &preds, targets, weights)?;
        let values: Vec<Tensor<T>> = preds.iter().map(|&v| g.value(v).clone()).collect();
        let report = loss_report(&Tensor::stack(&values)?, targets, batch.j)?;
        let loss_value = g.value(loss).data()[0].to_f64_lossy();
        g.backward(loss)?;
        Ok(StepOutcome {
            report,
            loss: loss_value,
            grads: p.grads(&g),
        })
    }
}

pub(crate) fn check_finite<T: Real>(stage: impl Fn() -> String, loss: f64, grads: &[Tensor<T>]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric {
            stage: stage(),
            msg: format!("loss is {loss}"),
        });
    }
    if !flat_norm(grads).is_finite() {
        return Err(Error::Numeric {
            stage: stage(),
            msg: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// Validation NMSE in dB over the forecast frames, if `val` is nonempty.
pub fn validation_db(model: &Model<f32>, val: &[Tensor<f32>], j: usize, k: usize, batch: usize) -> Result<Option<f64>> {
    if val.is_empty() || k == 0 {
        return Ok(None);
    }
    let stats = forecast_stats(model, val, j, k, batch)?;
    Ok(Some(to_db_floor(stats.nmse()?)))
}

/// ADAM on the rollout MSE over random minibatches of `train`.
///
/// `weighted` swaps the loss for the similarity-weighted one.
pub fn supervised_train(
    model: &mut Model<f32>,
    train: &[Tensor<f32>],
    val: &[Tensor<f32>],
    j: usize,
    k: usize,
    cfg: &TrainConfig,
    weighted: bool,
) -> Result<Vec<HistoryRecord>> {
    cfg.validate("/train")?;
    if train.is_empty() && cfg.iters > 0 {
        return Err(Error::Data("supervised training needs a nonempty training split".into()));
    }
    let mut opt = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let idx = sampler.next_batch(cfg.batch);
        let batch = SeqBatch::gather(train, &idx, j, k)?;
        let out = model.labeled_step(&batch, weighted)?;
        check_finite(|| format!("supervised iteration {it}"), out.loss, &out.grads)?;
        opt.update(&mut model.params, &out.grads)?;
        let val_nmse_db = if cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.iters) {
            validation_db(model, val, j, k, cfg.batch)?
        } else {
            None
        };
        history.push(HistoryRecord {
            iter: it,
            total: out.report.total,
            ape_free: out.report.ape_free,
            ape: out.report.ape,
            loss: out.loss,
            val_nmse_db,
            teacher_val_nmse_db: None,
            h: None,
            student_unlabeled_loss: None,
        });
    }
    Ok(history)
}
