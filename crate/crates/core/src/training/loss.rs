use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Mean squared error of a rollout, split into the teacher-forced part
/// (targets `2 … J`) and the accumulative part (targets `J+1 … J+K`).
///
/// Both parts share the total element count as denominator, so
/// `total = ape_free + ape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ape_free: f64,
    pub ape: f64,
    /// Per-step MSE, one entry per prediction.
    pub per_step: Vec<f64>,
}

/// Drop the first frame of a time-major `[L, B, ...]` sequence, giving the
/// targets aligned with a rollout's `L − 1` predictions.
pub fn shift_targets<T: Real>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let l = frames.dims().first().copied().unwrap_or(0);
    if l < 2 {
        return Err(Error::Data(format!("need at least 2 frames for targets, got {l}")));
    }
    let frame = frames.numel() / l;
    let mut dims = frames.dims().to_vec();
    dims[0] = l - 1;
    Tensor::new(dims, frames.data()[frame..].to_vec())
}

/// Loss report of aligned `preds` / `targets`, both `[L − 1, B, ...]`.
pub fn loss_report<T: Real>(preds: &Tensor<T>, targets: &Tensor<T>, j: usize) -> Result<LossReport> {
    if preds.dims() != targets.dims() || preds.dims().is_empty() {
        return Err(Error::shape("mse_loss", preds.dims(), targets.dims()));
    }
    let steps = preds.dims()[0];
    let n_step = preds.numel() / steps.max(1);
    let n_total = preds.numel() as f64;
    let mut per_step = Vec::with_capacity(steps);
    let (mut free, mut ape) = (0.0, 0.0);
    for s in 0..steps {
        let range = s * n_step..(s + 1) * n_step;
        let se: f64 = preds.data()[range.clone()]
            .iter()
            .zip(&targets.data()[range])
            .map(|(&p, &t)| {
                let d = p.to_f64_lossy() - t.to_f64_lossy();
                d * d
            })
            .sum();
        per_step.push(se / n_step as f64);
        // prediction s forecasts frame s + 2; frames 2 … J are teacher-forced
        if s + 2 <= j {
            free += se;
        } else {
            ape += se;
        }
    }
    let (ape_free, ape) = (free / n_total, ape / n_total);
    Ok(LossReport {
        total: ape_free + ape,
        ape_free,
        ape,
        per_step,
    })
}

/// [`loss_report`] against ground-truth frames `[L, B, ...]`.
pub fn mse_loss<T: Real>(preds: &Tensor<T>, frames: &Tensor<T>, j: usize) -> Result<LossReport> {
    loss_report(preds, &shift_targets(frames)?, j)
}

/// Softmax with the maximum logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Similarity weights of one window given its frames `χ_1 … χ_L`.
///
/// `χ̄` is the mean of all `L` frames; the logit of target frame `t = 2 … L`
/// is `−⟨χ_t, χ̄⟩ / (2·numel)`. Returns `L − 1` weights.
pub fn window_weights(frames: &[&[f32]]) -> Vec<f64> {
    let l = frames.len();
    let numel = frames.first().map_or(0, |f| f.len());
    let mut mean = vec![0.0f64; numel];
    for f in frames {
        for (m, &v) in mean.iter_mut().zip(*f) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= l as f64;
    }
    let logits: Vec<f64> = frames[1..]
        .iter()
        .map(|f| {
            let dot: f64 = f.iter().zip(&mean).map(|(&a, &b)| a as f64 * b).sum();
            -dot / (2.0 * numel.max(1) as f64)
        })
        .collect();
    softmax(&logits)
}

/// Per-sample weights `[B][L − 1]` of a time-major batch `[L, B, ...]`.
pub fn similarity_weights<T: Real>(frames: &Tensor<T>) -> Vec<Vec<f64>> {
    let (l, b) = (frames.dims()[0], frames.dims()[1]);
    let frame = frames.numel() / (l * b);
    let data: Vec<f32> = frames.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
    (0..b)
        .map(|w| {
            let per: Vec<&[f32]> = (0..l)
                .map(|t| &data[(t * b + w) * frame..(t * b + w + 1) * frame])
                .collect();
            window_weights(&per)
        })
        .collect()
}

/// Weighted loss `mean_b Σ_t w_{b,t} · mse_{b,t}` of aligned predictions.
pub fn weighted_mse<T: Real>(preds: &Tensor<T>, frames: &Tensor<T>) -> Result<f64> {
    let targets = shift_targets(frames)?;
    if preds.dims() != targets.dims() {
        return Err(Error::shape("weighted_mse", preds.dims(), targets.dims()));
    }
    let weights = similarity_weights(frames);
    let (steps, b) = (preds.dims()[0], preds.dims()[1]);
    let frame = preds.numel() / (steps * b);
    let mut loss = 0.0;
    for s in 0..steps {
        for (w, wts) in weights.iter().enumerate() {
            let at = (s * b + w) * frame;
            let se: f64 = preds.data()[at..at + frame]
                .iter()
                .zip(&targets.data()[at..at + frame])
                .map(|(&p, &t)| {
                    let d = p.to_f64_lossy() - t.to_f64_lossy();
                    d * d
                })
                .sum();
            loss += wts[s] * se / frame as f64;
        }
    }
    Ok(loss / b as f64)
}

/// Record the rollout loss on `g`: plain MSE against `targets`
/// `[L − 1, B, ...]`, or the similarity-weighted loss when `weights`
/// (`[B][L − 1]`) is given.
pub fn graph_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &[Var],
    targets: &Tensor<T>,
    weights: Option<&[Vec<f64>]>,
) -> Result<Var> {
    let steps = preds.len();
    if targets.dims().first() != Some(&steps) || targets.dims().len() < 2 {
        return Err(Error::shape("rollout loss", targets.dims(), &[steps]));
    }
    let b = targets.dims()[1];
    let frame = targets.numel() / (steps * b);
    let mut total: Option<Var> = None;
    for (s, &p) in preds.iter().enumerate() {
        let w: Vec<T> = match weights {
            None => vec![T::from_f64_lossy(1.0 / (steps * b * frame) as f64); b],
            Some(ws) => ws
                .iter()
                .map(|row| T::from_f64_lossy(row[s] / (b * frame) as f64))
                .collect(),
        };
        let t = g.constant(targets.index_axis0(s));
        let term = g.sq_err(p, t, &w)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("rollout loss of zero predictions".into()))
}
