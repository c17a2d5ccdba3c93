use crate::data::time_major_batch;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

use super::metrics::{abs_sums, sq_sums};

/// Error accumulators over the `K` forecast frames of a set of windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastStats {
    pub sq_err: Vec<f64>,
    pub energy: Vec<f64>,
    pub abs_err: Vec<f64>,
    pub mass: Vec<f64>,
    /// NMSE of each window over its forecast frames.
    pub window_nmse: Vec<f64>,
}

impl ForecastStats {
    fn new(k: usize) -> Self {
        ForecastStats {
            sq_err: vec![0.0; k],
            energy: vec![0.0; k],
            abs_err: vec![0.0; k],
            mass: vec![0.0; k],
            window_nmse: Vec::new(),
        }
    }

    fn merge(&mut self, other: ForecastStats) {
        for (a, b) in [
            (&mut self.sq_err, other.sq_err),
            (&mut self.energy, other.energy),
            (&mut self.abs_err, other.abs_err),
            (&mut self.mass, other.mass),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.window_nmse.extend(other.window_nmse);
    }

    fn ratio(num: &[f64], den: &[f64]) -> Result<f64> {
        let d: f64 = den.iter().sum();
        if d == 0.0 {
            return Err(Error::Data("metric over a zero-energy truth".into()));
        }
        Ok(num.iter().sum::<f64>() / d)
    }

    pub fn nmse(&self) -> Result<f64> {
        Self::ratio(&self.sq_err, &self.energy)
    }

    pub fn nmae(&self) -> Result<f64> {
        Self::ratio(&self.abs_err, &self.mass)
    }

    pub fn nmse_curve(&self) -> Result<Vec<f64>> {
        self.sq_err
            .iter()
            .zip(&self.energy)
            .map(|(e, s)| Self::ratio(&[*e], &[*s]))
            .collect()
    }

    pub fn nmae_curve(&self) -> Result<Vec<f64>> {
        self.abs_err
            .iter()
            .zip(&self.mass)
            .map(|(e, s)| Self::ratio(&[*e], &[*s]))
            .collect()
    }
}

/// Worker threads for evaluation: `STPREDICT_THREADS` or all cores.
pub fn eval_threads() -> usize {
    std::env::var("STPREDICT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Accumulate forecast errors given predictions `[J+K−1, B, ...]` for
/// windows `[L, ...]`.
pub fn accumulate(windows: &[&Tensor<f32>], preds: &Tensor<f32>, j: usize, k: usize) -> ForecastStats {
    let mut stats = ForecastStats::new(k);
    let b = windows.len();
    let frame = preds.numel() / preds.dims()[0] / b;
    let mut per_window = vec![(0.0, 0.0); b];
    for step in 0..k {
        // prediction index j − 1 + step forecasts frame j + step (0-based)
        let p = (j - 1 + step) * b * frame;
        for (w, win) in windows.iter().enumerate() {
            let truth = &win.data()[(j + step) * frame..(j + step + 1) * frame];
            let pred = &preds.data()[p + w * frame..p + (w + 1) * frame];
            let (e, s) = sq_sums(truth, pred);
            let (ae, am) = abs_sums(truth, pred);
            stats.sq_err[step] += e;
            stats.energy[step] += s;
            stats.abs_err[step] += ae;
            stats.mass[step] += am;
            per_window[w].0 += e;
            per_window[w].1 += s;
        }
    }
    stats.window_nmse = per_window
        .into_iter()
        .map(|(e, s)| if s > 0.0 { e / s } else { f64::NAN })
        .collect();
    stats
}

/// Roll `model` over `windows` in batches and accumulate forecast errors.
/// Batches are spread over [`eval_threads`] workers.
pub fn forecast_stats(model: &Model<f32>, windows: &[Tensor<f32>], j: usize, k: usize, batch: usize) -> Result<ForecastStats> {
    if k == 0 {
        return Err(Error::Invalid("forecast statistics need K >= 1".into()));
    }
    let chunks: Vec<&[Tensor<f32>]> = windows.chunks(batch.max(1)).collect();
    let run = |chunk: &[Tensor<f32>]| -> Result<ForecastStats> {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let frames = time_major_batch(&refs)?;
        let preds = model.predict(&frames, j, k)?;
        Ok(accumulate(&refs, &preds, j, k))
    };
    let threads = eval_threads().min(chunks.len()).max(1);
    let parts: Vec<Result<ForecastStats>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        chunks
                            .iter()
                            .skip(w)
                            .step_by(threads)
                            .map(|c| run(c))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut per_worker: Vec<std::vec::IntoIter<Result<ForecastStats>>> = handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked").into_iter())
                .collect();
            // restore chunk order so window_nmse lines up with `windows`
            (0..chunks.len())
                .map(|i| per_worker[i % threads].next().expect("one result per chunk"))
                .collect()
        })
    };
    let mut total = ForecastStats::new(k);
    for p in parts {
        total.merge(p?);
    }
    Ok(total)
}
