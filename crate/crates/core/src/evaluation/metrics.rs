use crate::error::{Error, Result};

/// Sentinel written in place of −∞ dB.
pub const DB_FLOOR: f64 = -120.0;

fn check_len(truth: &[f32], pred: &[f32]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::shape("metric", &[truth.len()], &[pred.len()]));
    }
    Ok(())
}

/// Error energy and truth energy, accumulated in f64.
pub fn sq_sums(truth: &[f32], pred: &[f32]) -> (f64, f64) {
    truth.iter().zip(pred).fold((0.0, 0.0), |(e, s), (&t, &p)| {
        let (t, p) = (t as f64, p as f64);
        (e + (t - p) * (t - p), s + t * t)
    })
}

pub fn abs_sums(truth: &[f32], pred: &[f32]) -> (f64, f64) {
    truth.iter().zip(pred).fold((0.0, 0.0), |(e, s), (&t, &p)| {
        let (t, p) = (t as f64, p as f64);
        (e + (t - p).abs(), s + t.abs())
    })
}

/// `Σ(χ − χ̂)² / Σχ²`
pub fn nmse(truth: &[f32], pred: &[f32]) -> Result<f64> {
    check_len(truth, pred)?;
    let (err, energy) = sq_sums(truth, pred);
    if energy == 0.0 {
        return Err(Error::Data("nmse of a zero-energy truth".into()));
    }
    Ok(err / energy)
}

/// `Σ|χ − χ̂| / Σ|χ|`
pub fn nmae(truth: &[f32], pred: &[f32]) -> Result<f64> {
    check_len(truth, pred)?;
    let (err, mass) = abs_sums(truth, pred);
    if mass == 0.0 {
        return Err(Error::Data("nmae of a zero truth".into()));
    }
    Ok(err / mass)
}

pub fn to_db(x: f64) -> Result<f64> {
    if x > 0.0 {
        Ok(10.0 * x.log10())
    } else {
        Err(Error::Invalid(format!("dB of non-positive value {x}")))
    }
}

/// [`to_db`] with zero mapped to [`DB_FLOOR`].
pub fn to_db_floor(x: f64) -> f64 {
    to_db(x).map_or(DB_FLOOR, |d| d.max(DB_FLOOR))
}
