//! Experiment configuration and the command implementations behind the
//! `stpredict` binary.
//!
//! Every command takes an [`ExperimentConfig`] plus file locations and
//! returns a serializable summary; the binary prints it as JSON on stdout.
//! Progress lines go to stderr.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::data::{Dataset, DatasetManifest, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, evaluate, run_ablation, Evaluation, MetricsRecord, RunManifest};
use crate::network::{build_model, read_checkpoint, write_checkpoint, Model, VariantSpec};
use crate::training::{labeled_subset, meta_train, supervised_train, HistoryRecord, MetaConfig, TrainConfig};

/// Where evaluation output goes and what the ablation grid spans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Windows per forward pass; the training batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Seeds of the ablation grid; `[train.seed]` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Ablation rows; the seven standard rows at the model's widths when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<VariantSpec>>,
    /// Ablation scenarios; `[data]` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<ScenarioConfig>>,
}

fn proposed() -> VariantSpec {
    VariantSpec::proposed()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: ScenarioConfig,
    #[serde(default = "proposed")]
    pub model: VariantSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

impl ExperimentConfig {
    pub fn new(data: ScenarioConfig, model: VariantSpec) -> Self {
        ExperimentConfig {
            data,
            model,
            train: TrainConfig::default(),
            meta: None,
            eval: EvalConfig::default(),
        }
    }

    /// Parse and validate; errors carry a JSON pointer to the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = pointer(e.path());
            Error::config(if path.is_empty() { "/".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("/", format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate("/data")?;
        self.model.validate("/model")?;
        self.train.validate("/train")?;
        if let Some(m) = &self.meta {
            m.validate("/meta")?;
        }
        if self.eval.batch == Some(0) {
            return Err(Error::config("/eval/batch", "must be positive"));
        }
        if let Some(vs) = &self.eval.variants {
            if vs.is_empty() {
                return Err(Error::config("/eval/variants", "need at least one variant"));
            }
            for (i, v) in vs.iter().enumerate() {
                v.validate(&format!("/eval/variants/{i}"))?;
            }
        }
        if let Some(ss) = &self.eval.scenarios {
            if ss.is_empty() {
                return Err(Error::config("/eval/scenarios", "need at least one scenario"));
            }
            for (i, s) in ss.iter().enumerate() {
                s.validate(&format!("/eval/scenarios/{i}"))?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn eval_batch(&self) -> usize {
        self.eval.batch.unwrap_or(self.train.batch)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.eval.seeds.clone()
        }
    }

    pub fn variants(&self) -> Vec<VariantSpec> {
        self.eval.variants.clone().unwrap_or_else(|| {
            VariantSpec::ablation_rows(&self.model.channels, self.model.ghu_channels)
                .into_iter()
                .map(|v| VariantSpec { kernel: self.model.kernel, ..v })
                .collect()
        })
    }

    pub fn scenarios(&self) -> Vec<ScenarioConfig> {
        self.eval.scenarios.clone().unwrap_or_else(|| vec![self.data.clone()])
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.stpc";
pub const TEACHER_FILE: &str = "teacher.stpc";
pub const STUDENT_FILE: &str = "student.stpc";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "config.json";

fn log_config(cfg: &ExperimentConfig) -> Result<()> {
    eprintln!("resolved config:\n{}", cfg.to_json()?);
    Ok(())
}

fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut text = String::new();
    for h in history {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
    Ok(())
}

/// Generate, preprocess and store the dataset described by `cfg.data`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    log_config(cfg)?;
    let t = Instant::now();
    let data = Dataset::build(&cfg.data)?;
    let manifest = data.write(out)?;
    eprintln!(
        "wrote {} / {} / {} windows to {} in {:.1}s",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(manifest)
}

/// Summary printed by the training commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub params: usize,
    pub iters: usize,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_loss: Option<f64>,
    pub final_val_nmse_db: Option<f64>,
    pub dataset_hash: String,
}

fn last_val(history: &[HistoryRecord]) -> Option<f64> {
    history.iter().rev().find_map(|h| h.val_nmse_db)
}

/// Supervised training on the dataset in `data_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary> {
    log_config(cfg)?;
    let data = Dataset::read(data_dir)?;
    let (j, k) = (data.config.j, data.config.k);
    let mut model = build_model::<f32>(&cfg.model, data.channels(), data.spatial(), cfg.train.seed)?;
    eprintln!("{}: {} parameters, {} training windows", cfg.model.label(), model.count_params(), data.train.len());
    let t = Instant::now();
    let history = supervised_train(&mut model, &data.train, &data.val, j, k, &cfg.train, false)?;
    eprintln!("trained {} iterations in {:.1}s", cfg.train.iters, t.elapsed().as_secs_f64());
    std::fs::create_dir_all(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &model)?;
    let history_path = out.join(HISTORY_FILE);
    write_history(&history_path, &history)?;
    write_config(out, cfg)?;
    Ok(TrainSummary {
        label: cfg.model.label(),
        params: model.count_params(),
        iters: history.len(),
        checkpoint,
        history: history_path,
        final_loss: history.last().map(|h| h.loss),
        final_val_nmse_db: last_val(&history),
        dataset_hash: data.hash()?,
    })
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<()> {
    let shape = |d: &Dataset| (d.channels(), d.spatial(), d.config.j, d.config.k);
    if shape(a) != shape(b) {
        return Err(Error::Data(format!(
            "labeled and unlabeled datasets disagree on (channels, spatial, J, K): {:?} vs {:?}",
            shape(a),
            shape(b)
        )));
    }
    Ok(())
}

/// Teacher/student training: a `meta.labeled_fraction` share of the labeled
/// training split plus the unlabeled training split, observed frames only.
/// `adaptive` forces the similarity-weighted loss on.
pub fn cmd_meta_train(
    cfg: &ExperimentConfig,
    labeled_dir: &Path,
    unlabeled_dir: &Path,
    out: &Path,
    adaptive: bool,
) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    let mut meta = cfg.meta.clone().unwrap_or_default();
    meta.adaptive |= adaptive;
    cfg.meta = Some(meta.clone());
    log_config(&cfg)?;
    let labeled = Dataset::read(labeled_dir)?;
    let unlabeled = Dataset::read(unlabeled_dir)?;
    check_compatible(&labeled, &unlabeled)?;
    let (j, k) = (labeled.config.j, labeled.config.k);
    let lab = labeled_subset(&labeled.train, meta.labeled_fraction, cfg.train.seed);
    let teacher = build_model::<f32>(&cfg.model, labeled.channels(), labeled.spatial(), cfg.train.seed)?;
    let student = build_model::<f32>(&cfg.model, labeled.channels(), labeled.spatial(), cfg.train.seed ^ 1)?;
    eprintln!(
        "{}: {} labeled and {} unlabeled windows",
        cfg.model.label(),
        lab.len(),
        unlabeled.train.len()
    );
    let t = Instant::now();
    let (teacher, student, history) =
        meta_train(teacher, student, &lab, &unlabeled.train, &labeled.val, j, k, &meta, &cfg.train)?;
    eprintln!("meta-trained {} iterations in {:.1}s", cfg.train.iters, t.elapsed().as_secs_f64());
    std::fs::create_dir_all(out)?;
    write_checkpoint(&out.join(TEACHER_FILE), &teacher)?;
    let checkpoint = out.join(STUDENT_FILE);
    write_checkpoint(&checkpoint, &student)?;
    let history_path = out.join(HISTORY_FILE);
    write_history(&history_path, &history)?;
    write_config(out, &cfg)?;
    Ok(TrainSummary {
        label: cfg.model.label(),
        params: student.count_params(),
        iters: history.len(),
        checkpoint,
        history: history_path,
        final_loss: history.last().map(|h| h.loss),
        final_val_nmse_db: last_val(&history),
        dataset_hash: unlabeled.hash()?,
    })
}

/// Which split `cmd_eval` scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

/// Score a checkpoint on one split of a stored dataset.
///
/// With a config, its model must be the checkpoint's variant. `out`
/// receives the report files.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    cfg: Option<&ExperimentConfig>,
    split: Split,
    out: Option<&Path>,
) -> Result<MetricsRecord> {
    let model = read_checkpoint(checkpoint)?;
    if let Some(cfg) = cfg {
        if cfg.model != model.variant {
            return Err(Error::config(
                "/model",
                format!(
                    "checkpoint variant {} {:?} does not match config variant {} {:?}",
                    model.variant.label(),
                    model.variant,
                    cfg.model.label(),
                    cfg.model
                ),
            ));
        }
    }
    let data = Dataset::read(data_dir)?;
    if (model.input_channels, model.spatial) != (data.channels(), data.spatial()) {
        return Err(Error::Data(format!(
            "checkpoint expects {} channels at {}x{}, dataset has {} at {}x{}",
            model.input_channels,
            model.spatial,
            model.spatial,
            data.channels(),
            data.spatial(),
            data.spatial()
        )));
    }
    let windows = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    };
    let batch = cfg.map_or(8, ExperimentConfig::eval_batch);
    let seed = cfg.map_or(0, |c| c.train.seed);
    let sc = data.config.scenario;
    let eval = evaluate(&model, windows, (sc, sc), seed, data.config.j, data.config.k, batch)?;
    if let Some(out) = out {
        let manifest = RunManifest {
            config: match cfg {
                Some(c) => serde_json::to_value(c)?,
                None => serde_json::Value::Null,
            },
            seeds: vec![seed],
            datasets: vec![(sc, data.hash()?)],
        };
        emit_report(std::slice::from_ref(&eval), &manifest, out)?;
    }
    Ok(eval.record)
}

/// Train and score the ablation grid; writes the report into `out`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    log_config(cfg)?;
    let variants = cfg.variants();
    let scenarios = cfg.scenarios();
    let seeds = cfg.seeds();
    let mut datasets: Vec<(Scenario, String)> = Vec::new();
    for sc in &scenarios {
        datasets.push((sc.scenario, Dataset::build(sc)?.hash()?));
    }
    let t = Instant::now();
    let evals: Vec<Evaluation> = run_ablation(&variants, &scenarios, &seeds, &cfg.train, |e| {
        eprintln!(
            "[{:.0}s] {:<16} {:?} seed {}: {:.2} dB",
            t.elapsed().as_secs_f64(),
            e.record.label,
            e.record.test_geo,
            e.record.seed,
            e.record.nmse_db
        );
    })?;
    let manifest = RunManifest {
        config: serde_json::to_value(cfg)?,
        seeds,
        datasets,
    };
    emit_report(&evals, &manifest, out)?;
    Ok(evals.into_iter().map(|e| e.record).collect())
}

/// Size and cost of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub label: String,
    pub variant: VariantSpec,
    pub input_channels: usize,
    pub spatial: usize,
    pub params: usize,
    pub params_millions: f64,
    /// Multiply-adds counted as two FLOPs, one sample, one recurrent step.
    pub flops_per_step: u64,
    /// One sample through a full `J + K` window.
    pub flops_per_window: u64,
}

pub fn params_report(model: &Model<f32>, window: usize) -> ParamsReport {
    let params = model.count_params();
    ParamsReport {
        label: model.variant.label(),
        variant: model.variant.clone(),
        input_channels: model.input_channels,
        spatial: model.spatial,
        params,
        params_millions: params as f64 / 1e6,
        flops_per_step: model.step_flops(1),
        flops_per_window: model.count_flops(1, window),
    }
}

/// Parameter and FLOP counts of the configured model at the configured
/// data geometry.
pub fn cmd_params(cfg: &ExperimentConfig) -> Result<ParamsReport> {
    let model = build_model::<f32>(&cfg.model, cfg.data.delay_taps, 2 * cfg.data.n_antennas, cfg.train.seed)?;
    Ok(params_report(&model, cfg.data.window()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"scenario": "S3_highway"}}"#).unwrap();
        assert_eq!(cfg.model, VariantSpec::proposed());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.variants().len(), 7);
        assert_eq!(cfg.seeds(), vec![0]);
    }

    #[test]
    fn errors_point_at_the_key() {
        let err = |text: &str| match ExperimentConfig::from_json(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(err(r#"{"data": {"scenario": "S1_city_campus", "ratios": [7, 1]}}"#), "/data/ratios");
        assert_eq!(err(r#"{"data": {"scenario": "S1_city_campus", "ratios": "7:1:2"}}"#), "/data/ratios");
        assert_eq!(err(r#"{"data": {"scenario": "S1_city_campus"}, "train": {"lr": "fast"}}"#), "/train/lr");
        assert_eq!(err(r#"{"data": {"scenario": "S9"}}"#), "/data/scenario");
        assert_eq!(err(r#"{"data": {"scenario": "S1_city_campus"}, "train": {"batch": 0}}"#), "/train/batch");
        assert!(err(r#"{"data": {"scenario": "S1_city_campus", "ratio": [7, 1, 2]}}"#).starts_with("/data"));
        assert_eq!(err("{"), "/");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"scenario": "S2_static_rx"}, "meta": {}}"#).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
