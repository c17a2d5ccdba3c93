//! Metrics, forecast curves, CDFs, the ablation grid and report files.

mod forecast;
mod metrics;
mod report;

pub use forecast::{accumulate, eval_threads, forecast_stats, ForecastStats};
pub use metrics::{abs_sums, nmae, nmse, sq_sums, to_db, to_db_floor, DB_FLOOR};
pub use report::{
    emit_report, evaluate, mse_cdf, per_timestep_curves, run_ablation, train_and_evaluate, CdfSeries, Curves,
    Evaluation, MetricsRecord, RunManifest, StepMetrics, CDFS_FILE, CURVES_FILE, METRICS_FILE, RUN_MANIFEST_FILE,
};
