use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::network::{build_model, Model, VariantSpec};
use crate::tensor::Tensor;
use crate::training::{supervised_train, TrainConfig};

use super::forecast::{forecast_stats, ForecastStats};
use super::metrics::to_db_floor;

/// Metrics at one forecast step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub nmae_linear: f64,
    pub nmae_db: f64,
}

/// Per-step NMSE/NMAE over the forecast horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub nmse_linear: Vec<f64>,
    pub nmse_db: Vec<f64>,
    pub nmae_linear: Vec<f64>,
    pub nmae_db: Vec<f64>,
}

impl Curves {
    pub fn from_stats(stats: &ForecastStats) -> Result<Self> {
        let nmse_linear = stats.nmse_curve()?;
        let nmae_linear = stats.nmae_curve()?;
        Ok(Curves {
            nmse_db: nmse_linear.iter().map(|&x| to_db_floor(x)).collect(),
            nmae_db: nmae_linear.iter().map(|&x| to_db_floor(x)).collect(),
            nmse_linear,
            nmae_linear,
        })
    }

    pub fn len(&self) -> usize {
        self.nmse_linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nmse_linear.is_empty()
    }
}

/// Per-step curves of `model` on `windows`, steps `J+1..=J+K`.
pub fn per_timestep_curves(model: &Model<f32>, windows: &[Tensor<f32>], j: usize, k: usize, batch: usize) -> Result<Curves> {
    Curves::from_stats(&forecast_stats(model, windows, j, k, batch)?)
}

/// Empirical CDF of per-window NMSE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfSeries {
    pub values: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl CdfSeries {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("CDF of an empty set".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Data("CDF input contains NaN (zero-energy window?)".into()));
        }
        let mut values = values.to_vec();
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let fractions = (1..=values.len()).map(|i| i as f64 / n).collect();
        Ok(CdfSeries { values, fractions })
    }

    /// Fraction of windows with NMSE `<= x`.
    pub fn at(&self, x: f64) -> f64 {
        let count = self.values.partition_point(|&v| v <= x);
        if count == 0 {
            0.0
        } else {
            self.fractions[count - 1]
        }
    }

    pub fn median(&self) -> f64 {
        let n = self.values.len();
        if n % 2 == 1 {
            self.values[n / 2]
        } else {
            0.5 * (self.values[n / 2 - 1] + self.values[n / 2])
        }
    }

    /// Same series with values in dB (floored).
    pub fn to_db(&self) -> CdfSeries {
        CdfSeries {
            values: self.values.iter().map(|&v| to_db_floor(v)).collect(),
            fractions: self.fractions.clone(),
        }
    }
}

pub fn mse_cdf(model: &Model<f32>, windows: &[Tensor<f32>], j: usize, k: usize, batch: usize) -> Result<CdfSeries> {
    CdfSeries::from_values(&forecast_stats(model, windows, j, k, batch)?.window_nmse)
}

/// Aggregate and per-step forecast metrics of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub variant: VariantSpec,
    pub train_geo: Scenario,
    pub test_geo: Scenario,
    pub seed: u64,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub nmae_linear: f64,
    pub nmae_db: f64,
    pub per_step: Vec<StepMetrics>,
}

impl MetricsRecord {
    pub fn from_stats(
        variant: &VariantSpec,
        pair: (Scenario, Scenario),
        seed: u64,
        stats: &ForecastStats,
    ) -> Result<Self> {
        let curves = Curves::from_stats(stats)?;
        let per_step = (0..curves.len())
            .map(|s| StepMetrics {
                step: s + 1,
                nmse_linear: curves.nmse_linear[s],
                nmse_db: curves.nmse_db[s],
                nmae_linear: curves.nmae_linear[s],
                nmae_db: curves.nmae_db[s],
            })
            .collect();
        let (nmse, nmae) = (stats.nmse()?, stats.nmae()?);
        Ok(MetricsRecord {
            label: variant.label(),
            variant: variant.clone(),
            train_geo: pair.0,
            test_geo: pair.1,
            seed,
            nmse_linear: nmse,
            nmse_db: to_db_floor(nmse),
            nmae_linear: nmae,
            nmae_db: to_db_floor(nmae),
            per_step,
        })
    }
}

/// A metrics record with the window-level CDF behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub cdf: CdfSeries,
}

/// Score `model` on `windows` and package the result.
pub fn evaluate(
    model: &Model<f32>,
    windows: &[Tensor<f32>],
    pair: (Scenario, Scenario),
    seed: u64,
    j: usize,
    k: usize,
    batch: usize,
) -> Result<Evaluation> {
    let stats = forecast_stats(model, windows, j, k, batch)?;
    Ok(Evaluation {
        record: MetricsRecord::from_stats(&model.variant, pair, seed, &stats)?,
        cdf: CdfSeries::from_values(&stats.window_nmse)?,
    })
}

/// Train `variant` on `data` with `seed` driving both initialization and
/// minibatch order, then evaluate on its test split.
pub fn train_and_evaluate(variant: &VariantSpec, data: &Dataset, train: &TrainConfig, seed: u64) -> Result<(Model<f32>, Evaluation)> {
    let cfg = &data.config;
    let mut model = build_model::<f32>(variant, data.channels(), data.spatial(), seed)?;
    let tc = TrainConfig { seed, ..train.clone() };
    supervised_train(&mut model, &data.train, &data.val, cfg.j, cfg.k, &tc, false)?;
    let eval = evaluate(&model, &data.test, (cfg.scenario, cfg.scenario), seed, cfg.j, cfg.k, train.batch)?;
    Ok((model, eval))
}

/// Train and score every `variant × scenario × seed` combination, in that
/// nesting order (scenario outermost). Each dataset is generated once.
/// `progress` sees every finished evaluation.
pub fn run_ablation(
    variants: &[VariantSpec],
    scenarios: &[ScenarioConfig],
    seeds: &[u64],
    train: &TrainConfig,
    mut progress: impl FnMut(&Evaluation),
) -> Result<Vec<Evaluation>> {
    for (i, v) in variants.iter().enumerate() {
        v.validate(&format!("/model/{i}"))?;
    }
    let mut out = Vec::with_capacity(variants.len() * scenarios.len() * seeds.len());
    for sc in scenarios {
        let data = Dataset::build(sc)?;
        for v in variants {
            for &seed in seeds {
                let (_, eval) = train_and_evaluate(v, &data, train, seed)?;
                progress(&eval);
                out.push(eval);
            }
        }
    }
    Ok(out)
}

/// Provenance written next to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// `(scenario, content hash)` of every dataset used.
    pub datasets: Vec<(Scenario, String)>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    base: String,
    ta: bool,
    sta: bool,
    ghu: bool,
    train_geo: Scenario,
    test_geo: Scenario,
    seed: u64,
    nmse_linear: f64,
    nmse_db: f64,
    nmae_linear: f64,
    nmae_db: f64,
}

#[derive(Serialize)]
struct CurveEntry<'a> {
    label: &'a str,
    train_geo: Scenario,
    test_geo: Scenario,
    seed: u64,
    step: Vec<usize>,
    nmse_db: Vec<f64>,
    nmae_db: Vec<f64>,
}

#[derive(Serialize)]
struct CdfEntry<'a> {
    label: &'a str,
    train_geo: Scenario,
    test_geo: Scenario,
    seed: u64,
    nmse_db: Vec<f64>,
    fraction: &'a [f64],
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "curves.json";
pub const CDFS_FILE: &str = "cdfs.json";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Write `metrics.csv`, `curves.json`, `cdfs.json` and `manifest.json`
/// into `out_dir`.
pub fn emit_report(evals: &[Evaluation], manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = csv::Writer::from_path(out_dir.join(METRICS_FILE))?;
    for e in evals {
        let r = &e.record;
        csv.serialize(CsvRow {
            label: &r.label,
            base: format!("{:?}", r.variant.base),
            ta: r.variant.ta_enabled,
            sta: r.variant.sta_enabled,
            ghu: r.variant.ghu_enabled,
            train_geo: r.train_geo,
            test_geo: r.test_geo,
            seed: r.seed,
            nmse_linear: r.nmse_linear,
            nmse_db: r.nmse_db,
            nmae_linear: r.nmae_linear,
            nmae_db: r.nmae_db,
        })?;
    }
    csv.flush()?;
    let curves: Vec<CurveEntry> = evals
        .iter()
        .map(|e| {
            let r = &e.record;
            CurveEntry {
                label: &r.label,
                train_geo: r.train_geo,
                test_geo: r.test_geo,
                seed: r.seed,
                step: r.per_step.iter().map(|s| s.step).collect(),
                nmse_db: r.per_step.iter().map(|s| s.nmse_db).collect(),
                nmae_db: r.per_step.iter().map(|s| s.nmae_db).collect(),
            }
        })
        .collect();
    write_json(&out_dir.join(CURVES_FILE), &curves)?;
    let cdfs: Vec<CdfEntry> = evals
        .iter()
        .map(|e| {
            let r = &e.record;
            CdfEntry {
                label: &r.label,
                train_geo: r.train_geo,
                test_geo: r.test_geo,
                seed: r.seed,
                nmse_db: e.cdf.to_db().values,
                fraction: &e.cdf.fractions,
            }
        })
        .collect();
    write_json(&out_dir.join(CDFS_FILE), &cdfs)?;
    write_json(&out_dir.join(RUN_MANIFEST_FILE), manifest)
}
