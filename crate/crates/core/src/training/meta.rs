use serde::{Deserialize, Serialize};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_finite, LossReport, supervised_train, validation_db, BatchSampler, HistoryRecord, SeqBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::optim::{apply_delta, AdamConfig, AdamState};
use crate::params::{flat_dot, flat_norm, ParamStore};
use crate::tensor::{Real, Tensor};

/// A labeled loss value, its APE split when the learner has one, and the
/// gradient.
#[derive(Clone, Debug)]
pub struct LabeledLoss<T: Real> {
    pub loss: f64,
    pub report: Option<LossReport>,
    pub grads: Vec<Tensor<T>>,
}

/// What the meta pseudo-label scheme needs from a trainable predictor.
pub trait Learner<T: Real>: Clone {
    type Batch;
    type Output;

    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Detached predictions, reading only the observed part of `batch`.
    fn predict(&self, batch: &Self::Batch) -> Result<Self::Output>;
    /// Loss against the batch's own labels, and its gradient.
    fn label_loss_grad(&self, batch: &Self::Batch, weighted: bool) -> Result<LabeledLoss<T>>;
    /// Loss against explicit targets, and its gradient.
    fn target_loss_grad(&self, batch: &Self::Batch, targets: &Self::Output) -> Result<(f64, Vec<Tensor<T>>)>;
}

impl<T: Real> Learner<T> for Model<T> {
    type Batch = SeqBatch<T>;
    type Output = Tensor<T>;

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn predict(&self, batch: &SeqBatch<T>) -> Result<Tensor<T>> {
        Model::predict(self, &batch.frames, batch.j, batch.k)
    }

    fn label_loss_grad(&self, batch: &SeqBatch<T>, weighted: bool) -> Result<LabeledLoss<T>> {
        let out = self.labeled_step(batch, weighted)?;
        Ok(LabeledLoss {
            loss: out.loss,
            report: Some(out.report),
            grads: out.grads,
        })
    }

    fn target_loss_grad(&self, batch: &SeqBatch<T>, targets: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let out = self.target_step(batch, targets, None)?;
        Ok((out.loss, out.grads))
    }
}

mod defaults {
    pub fn student_lr() -> f64 {
        0.05
    }
    pub fn teacher_lr() -> f64 {
        1e-3
    }
    pub fn labeled_fraction() -> f64 {
        0.1
    }
    pub fn feedback_clip() -> f64 {
        10.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Step size of the student's SGD update on pseudo labels.
    #[serde(default = "defaults::student_lr")]
    pub student_lr: f64,
    /// ADAM step size of the teacher.
    #[serde(default = "defaults::teacher_lr")]
    pub teacher_lr: f64,
    #[serde(default = "defaults::labeled_fraction")]
    pub labeled_fraction: f64,
    /// Use the similarity-weighted loss for every labeled term.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "defaults::feedback_clip")]
    pub feedback_clip: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            student_lr: defaults::student_lr(),
            teacher_lr: defaults::teacher_lr(),
            labeled_fraction: defaults::labeled_fraction(),
            adaptive: false,
            feedback_clip: defaults::feedback_clip(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (key, v) in [("student_lr", self.student_lr), ("teacher_lr", self.teacher_lr)] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{path}/{key}"), format!("must be positive, got {v}")));
            }
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::config(
                format!("{path}/labeled_fraction"),
                format!("must lie in (0, 1], got {}", self.labeled_fraction),
            ));
        }
        if !(self.feedback_clip >= 0.0) {
            return Err(Error::config(format!("{path}/feedback_clip"), "must be non-negative"));
        }
        Ok(())
    }
}

/// The student update and the teacher's feedback signal for one step.
#[derive(Clone, Debug)]
pub struct Feedback<T: Real> {
    /// Clipped feedback scalar.
    pub h: f64,
    pub h_raw: f64,
    /// Student parameter change `θ_S' − θ_S`.
    pub delta: Vec<Tensor<T>>,
    pub student_unlabeled_loss: f64,
    /// Labeled loss of the updated student.
    pub student_labeled_loss: f64,
    pub student_report: Option<LossReport>,
    /// `−h · ∇_T MSE(T(x_u), S(x_u))`, absent when `h = 0`.
    pub teacher_grad: Option<Vec<Tensor<T>>>,
    pub student_grad_norm: f64,
}

/// Pseudo-label the unlabeled batch with the teacher, take the student's
/// SGD step on it, and turn the updated student's labeled gradient into the
/// teacher's first-order feedback term.
///
/// With `g_u = ∇_S L_u` and `g_l' = ∇_S L_l(θ_S')` the scalar is
/// `h = η_S ⟨g_l', g_u⟩`. A positive `h` means the step helped on labeled
/// data; the teacher then pushes its pseudo labels further from the
/// student's current outputs so the next student step goes the same way.
/// This is the exact bilevel gradient projected onto `∇_T MSE(T, S)`.
pub fn teacher_feedback<T: Real, L: Learner<T>>(
    teacher: &L,
    student: &L,
    labeled: &L::Batch,
    unlabeled: &L::Batch,
    cfg: &MetaConfig,
) -> Result<Feedback<T>> {
    let pseudo = teacher.predict(unlabeled)?;
    let (lu, g_u) = student.target_loss_grad(unlabeled, &pseudo)?;
    check_finite(|| "student pseudo-label gradient".into(), lu, &g_u)?;
    let eta = T::from_f64_lossy(cfg.student_lr);
    let delta: Vec<Tensor<T>> = g_u
        .iter()
        .map(|g| {
            let data = g.data().iter().map(|&v| -eta * v).collect();
            Tensor::new(g.dims().to_vec(), data).expect("same dims")
        })
        .collect();
    let mut updated = student.clone();
    apply_delta(updated.params_mut(), &delta);
    let after = updated.label_loss_grad(labeled, cfg.adaptive)?;
    check_finite(|| "updated student labeled gradient".into(), after.loss, &after.grads)?;
    let h_raw = -flat_dot(&after.grads, &delta);
    let h = h_raw.clamp(-cfg.feedback_clip, cfg.feedback_clip);
    let teacher_grad = if h != 0.0 {
        let student_out = student.predict(unlabeled)?;
        let (lf, g_f) = teacher.target_loss_grad(unlabeled, &student_out)?;
        check_finite(|| "teacher feedback gradient".into(), lf, &g_f)?;
        let scale = T::from_f64_lossy(-h);
        Some(
            g_f.into_iter()
                .map(|g| {
                    let data = g.data().iter().map(|&v| scale * v).collect();
                    Tensor::new(g.dims().to_vec(), data).expect("same dims")
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Feedback {
        h,
        h_raw,
        delta,
        student_unlabeled_loss: lu,
        student_labeled_loss: after.loss,
        student_report: after.report,
        teacher_grad,
        student_grad_norm: flat_norm(&g_u),
    })
}

/// Teacher, student and the teacher's optimizer.
#[derive(Clone, Debug)]
pub struct MetaState<T: Real, L: Learner<T>> {
    pub teacher: L,
    pub student: L,
    pub teacher_opt: AdamState<T>,
    pub cfg: MetaConfig,
}

impl<T: Real, L: Learner<T>> MetaState<T, L> {
    pub fn new(teacher: L, student: L, cfg: MetaConfig) -> Self {
        let teacher_opt = AdamState::new(teacher.params(), AdamConfig::with_lr(cfg.teacher_lr));
        MetaState {
            teacher,
            student,
            teacher_opt,
            cfg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDiagnostics {
    pub h: f64,
    pub h_raw: f64,
    pub teacher_labeled_loss: f64,
    pub student_unlabeled_loss: f64,
    pub student_labeled_loss: f64,
    pub teacher_grad_norm: f64,
    pub student_grad_norm: f64,
    /// APE split of the updated student on the labeled batch.
    pub student_report: Option<LossReport>,
}

/// One meta pseudo-label step: student first, then teacher.
pub fn meta_step<T: Real, L: Learner<T>>(
    state: &mut MetaState<T, L>,
    labeled: &L::Batch,
    unlabeled: &L::Batch,
) -> Result<MetaDiagnostics> {
    let fb = teacher_feedback(&state.teacher, &state.student, labeled, unlabeled, &state.cfg)?;
    let own = state.teacher.label_loss_grad(labeled, state.cfg.adaptive)?;
    check_finite(|| "teacher labeled gradient".into(), own.loss, &own.grads)?;
    let (lt, mut g_t) = (own.loss, own.grads);
    if let Some(extra) = &fb.teacher_grad {
        for (g, e) in g_t.iter_mut().zip(extra) {
            for (a, &b) in g.data_mut().iter_mut().zip(e.data()) {
                *a = *a + b;
            }
        }
    }
    let teacher_grad_norm = flat_norm(&g_t);
    apply_delta(state.student.params_mut(), &fb.delta);
    state.teacher_opt.update(state.teacher.params_mut(), &g_t)?;
    Ok(MetaDiagnostics {
        h: fb.h,
        h_raw: fb.h_raw,
        teacher_labeled_loss: lt,
        student_unlabeled_loss: fb.student_unlabeled_loss,
        student_labeled_loss: fb.student_labeled_loss,
        teacher_grad_norm,
        student_grad_norm: fb.student_grad_norm,
        student_report: fb.student_report,
    })
}

/// Seed offset separating the unlabeled sampler from the labeled one.
const UNLABELED_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Loop [`meta_step`] over random labeled/unlabeled minibatches.
///
/// The unlabeled windows are cut to their first `J` frames before use. With
/// no unlabeled data both networks are trained supervised on `labeled`.
/// Returns `(teacher, student, history)`; validation tracks the student.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    teacher: Model<f32>,
    student: Model<f32>,
    labeled: &[Tensor<f32>],
    unlabeled: &[Tensor<f32>],
    val: &[Tensor<f32>],
    j: usize,
    k: usize,
    cfg: &MetaConfig,
    train: &TrainConfig,
) -> Result<(Model<f32>, Model<f32>, Vec<HistoryRecord>)> {
    cfg.validate("/meta")?;
    train.validate("/train")?;
    if teacher.variant != student.variant {
        return Err(Error::Invalid(format!(
            "teacher and student variants differ: {:?} vs {:?}",
            teacher.variant, student.variant
        )));
    }
    if unlabeled.is_empty() {
        let (mut teacher, mut student) = (teacher, student);
        supervised_train(&mut teacher, labeled, val, j, k, train, cfg.adaptive)?;
        let history = supervised_train(&mut student, labeled, val, j, k, train, cfg.adaptive)?;
        return Ok((teacher, student, history));
    }
    if labeled.is_empty() && train.iters > 0 {
        return Err(Error::Data("meta training needs labeled windows".into()));
    }
    let observed: Vec<Tensor<f32>> = unlabeled
        .iter()
        .map(|w| {
            let frame = w.numel() / w.dims()[0];
            let mut dims = w.dims().to_vec();
            dims[0] = j.min(dims[0]);
            Tensor::new(dims.clone(), w.data()[..dims[0] * frame].to_vec())
        })
        .collect::<Result<_>>()?;
    let mut state = MetaState::new(teacher, student, cfg.clone());
    let mut lab = BatchSampler::new(labeled.len(), train.seed);
    let mut unl = BatchSampler::new(observed.len(), train.seed ^ UNLABELED_STREAM);
    let mut history = Vec::with_capacity(train.iters);
    for it in 0..train.iters {
        let lb = SeqBatch::gather(labeled, &lab.next_batch(train.batch), j, k)?;
        let ub = SeqBatch::gather(&observed, &unl.next_batch(train.batch), j, k)?;
        let diag = meta_step(&mut state, &lb, &ub).map_err(|e| match e {
            Error::Numeric { stage, msg } => Error::Numeric {
                stage: format!("meta iteration {it}: {stage}"),
                msg,
            },
            other => other,
        })?;
        let validate = train.val_every > 0 && ((it + 1) % train.val_every == 0 || it + 1 == train.iters);
        let (val_nmse_db, teacher_val_nmse_db) = if validate {
            (
                validation_db(&state.student, val, j, k, train.batch)?,
                validation_db(&state.teacher, val, j, k, train.batch)?,
            )
        } else {
            (None, None)
        };
        let report = diag.student_report.clone().expect("models report the APE split");
        history.push(HistoryRecord {
            iter: it,
            total: report.total,
            ape_free: report.ape_free,
            ape: report.ape,
            loss: diag.student_labeled_loss,
            val_nmse_db,
            teacher_val_nmse_db,
            h: Some(diag.h),
            student_unlabeled_loss: Some(diag.student_unlabeled_loss),
        });
    }
    Ok((state.teacher, state.student, history))
}

/// The labeled share of `windows`: `max(1, round(fraction · n))` windows
/// drawn without replacement, in draw order.
pub fn labeled_subset(windows: &[Tensor<f32>], fraction: f64, seed: u64) -> Vec<Tensor<f32>> {
    if windows.is_empty() {
        return Vec::new();
    }
    let n = ((fraction * windows.len() as f64).round() as usize).clamp(1, windows.len());
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx[..n].iter().map(|&i| windows[i].clone()).collect()
}
