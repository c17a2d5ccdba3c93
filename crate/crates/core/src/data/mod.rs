//! Synthetic CSI, preprocessing into real frames, splits and storage.

mod csit;
mod synth;

pub use csit::{decode, encode, read_raw, read_tensor, write_raw, write_tensor, DType, RawTensor, CSIT_VERSION};
pub use synth::{draw_paths, generate_synthetic, render, tap_envelope, uca_phase, PathInfo};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Highest Doppler the sounder could resolve.
pub const MAX_DOPPLER_HZ: f64 = 806.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "S1_city_campus")]
    S1CityCampus,
    #[serde(rename = "S2_static_rx")]
    S2StaticRx,
    #[serde(rename = "S3_highway")]
    S3Highway,
}

impl Scenario {
    pub fn default_max_doppler_hz(self) -> f64 {
        match self {
            Scenario::S1CityCampus => 0.2,
            Scenario::S2StaticRx => 0.3,
            Scenario::S3Highway => 0.5,
        }
    }

    pub fn default_angular_drift(self) -> f64 {
        match self {
            Scenario::S1CityCampus => 0.005,
            Scenario::S2StaticRx => 0.005,
            Scenario::S3Highway => 0.02,
        }
    }
}

mod defaults {
    pub fn bursts() -> usize {
        2000
    }
    pub fn delay_taps() -> usize {
        61
    }
    pub fn n_antennas() -> usize {
        8
    }
    pub fn carrier_hz() -> f64 {
        5.9e9
    }
    pub fn burst_interval_s() -> f64 {
        0.05
    }
    pub fn n_paths() -> usize {
        8
    }
    pub fn yes() -> bool {
        true
    }
    pub fn horizon() -> usize {
        10
    }
    pub fn ratios() -> Vec<u32> {
        vec![7, 1, 2]
    }
}

/// Generation and preprocessing settings for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default = "defaults::bursts")]
    pub bursts: usize,
    #[serde(default = "defaults::delay_taps")]
    pub delay_taps: usize,
    #[serde(default = "defaults::n_antennas")]
    pub n_antennas: usize,
    #[serde(default = "defaults::carrier_hz")]
    pub carrier_hz: f64,
    #[serde(default = "defaults::burst_interval_s")]
    pub burst_interval_s: f64,
    /// Per-scenario default when absent.
    #[serde(default)]
    pub max_doppler_hz: Option<f64>,
    /// Largest per-burst angular drift of a path, radians. Per-scenario
    /// default when absent.
    #[serde(default)]
    pub angular_drift_rad: Option<f64>,
    #[serde(default = "defaults::n_paths")]
    pub n_paths: usize,
    /// Paths are born and die over time.
    #[serde(default = "defaults::yes")]
    pub path_churn: bool,
    /// `(start, len)` burst ranges during which nothing moves.
    #[serde(default)]
    pub stationary_segments: Vec<(usize, usize)>,
    #[serde(default)]
    pub seed: u64,
    /// Observed frames per window.
    #[serde(default = "defaults::horizon")]
    pub j: usize,
    /// Forecast frames per window.
    #[serde(default = "defaults::horizon")]
    pub k: usize,
    /// Train/validation/test proportions.
    #[serde(default = "defaults::ratios")]
    pub ratios: Vec<u32>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioConfig {
            scenario,
            bursts: defaults::bursts(),
            delay_taps: defaults::delay_taps(),
            n_antennas: defaults::n_antennas(),
            carrier_hz: defaults::carrier_hz(),
            burst_interval_s: defaults::burst_interval_s(),
            max_doppler_hz: None,
            angular_drift_rad: None,
            n_paths: defaults::n_paths(),
            path_churn: true,
            stationary_segments: Vec::new(),
            seed: 0,
            j: defaults::horizon(),
            k: defaults::horizon(),
            ratios: defaults::ratios(),
        }
    }

    /// Small delay/antenna extents for quick experiments.
    pub fn desk(scenario: Scenario, seed: u64) -> Self {
        ScenarioConfig {
            delay_taps: 4,
            n_antennas: 4,
            seed,
            ..Self::new(scenario)
        }
    }

    pub fn max_doppler(&self) -> f64 {
        self.max_doppler_hz
            .unwrap_or_else(|| self.scenario.default_max_doppler_hz())
    }

    pub fn drift(&self) -> f64 {
        self.angular_drift_rad
            .unwrap_or_else(|| self.scenario.default_angular_drift())
    }

    pub fn window(&self) -> usize {
        self.j + self.k
    }

    pub fn is_stationary(&self, t: usize) -> bool {
        self.stationary_segments
            .iter()
            .any(|&(s, len)| t >= s && t < s + len)
    }

    /// Check every field; errors carry JSON pointers below `path`.
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("{path}/{key}"), msg));
        for (key, v) in [
            ("bursts", self.bursts),
            ("delay_taps", self.delay_taps),
            ("n_antennas", self.n_antennas),
            ("n_paths", self.n_paths),
            ("j", self.j),
        ] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if !(self.carrier_hz > 0.0) {
            return bad("carrier_hz", format!("must be positive, got {}", self.carrier_hz));
        }
        if !(self.burst_interval_s > 0.0) {
            return bad("burst_interval_s", format!("must be positive, got {}", self.burst_interval_s));
        }
        let nu = self.max_doppler();
        if !(0.0..=MAX_DOPPLER_HZ).contains(&nu) {
            return bad("max_doppler_hz", format!("must lie in [0, {MAX_DOPPLER_HZ}], got {nu}"));
        }
        let drift = self.drift();
        if !(0.0..=std::f64::consts::PI).contains(&drift) {
            return bad("angular_drift_rad", format!("must lie in [0, pi], got {drift}"));
        }
        for (i, &(s, len)) in self.stationary_segments.iter().enumerate() {
            if s.checked_add(len).is_none_or(|e| e > self.bursts) {
                return bad(
                    &format!("stationary_segments/{i}"),
                    format!("segment ({s}, {len}) runs past {} bursts", self.bursts),
                );
            }
        }
        if self.ratios.len() != 3 || self.ratios.iter().sum::<u32>() == 0 {
            return bad("ratios", format!("need three proportions with a positive sum, got {:?}", self.ratios));
        }
        Ok(())
    }
}

/// Complex CSI `[T, D, N, N]`, interleaved `(re, im)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexCsi {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl ComplexCsi {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims[2] != dims[3] {
            return Err(Error::shape("complex csi", &dims, &[dims[0], dims[1], dims[2], dims[2]]));
        }
        if data.len() != 2 * dims.iter().product::<usize>() {
            return Err(Error::Invalid(format!(
                "{} floats do not fit complex dims {dims:?}",
                data.len()
            )));
        }
        Ok(ComplexCsi { dims, data })
    }

    pub fn bursts(&self) -> usize {
        self.dims[0]
    }

    pub fn get(&self, t: usize, d: usize, i: usize, j: usize) -> (f32, f32) {
        let [_, dl, n, _] = self.dims;
        let at = 2 * (((t * dl + d) * n + i) * n + j);
        (self.data[at], self.data[at + 1])
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            dtype: DType::C64,
            dims: self.dims.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn from_raw(raw: RawTensor) -> Result<Self> {
        match (raw.dtype, raw.dims.as_slice()) {
            (DType::C64, &[t, d, n, m]) => Self::new([t, d, n, m], raw.data),
            _ => Err(Error::Format {
                offset: 5,
                msg: format!("expected rank-4 complex data, got {:?} {:?}", raw.dtype, raw.dims),
            }),
        }
    }
}

/// Map every `N × N` complex slice `X` to `[[Re X, −Im X], [Im X, Re X]]`.
pub fn complex_to_real(h: &ComplexCsi) -> Tensor<f32> {
    let [t_len, d_len, n, _] = h.dims;
    let s = 2 * n;
    let mut out = vec![0.0f32; t_len * d_len * s * s];
    for t in 0..t_len {
        for d in 0..d_len {
            let base = (t * d_len + d) * s * s;
            for i in 0..n {
                for j in 0..n {
                    let (re, im) = h.get(t, d, i, j);
                    out[base + i * s + j] = re;
                    out[base + i * s + j + n] = -im;
                    out[base + (i + n) * s + j] = im;
                    out[base + (i + n) * s + j + n] = re;
                }
            }
        }
    }
    Tensor::new(vec![t_len, d_len, s, s], out).expect("sized above")
}

/// Non-overlapping windows of `width` along axis 0; the tail is dropped.
pub fn window_slices(seq: &Tensor<f32>, width: usize) -> Vec<Tensor<f32>> {
    let t_len = seq.dims().first().copied().unwrap_or(0);
    if width == 0 {
        return Vec::new();
    }
    let frame = seq.numel() / t_len.max(1);
    let mut dims = seq.dims().to_vec();
    dims[0] = width;
    (0..t_len / width)
        .map(|w| {
            let data = seq.data()[w * width * frame..(w + 1) * width * frame].to_vec();
            Tensor::new(dims.clone(), data).expect("window shape")
        })
        .collect()
}

/// Shuffle `0..n` with `seed` and cut it in proportion to `ratios`, giving
/// leftover items to the parts with the largest fractional remainders.
pub fn split_indices(n: usize, ratios: &[u32], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.len() != 3 || ratios.iter().sum::<u32>() == 0 {
        return Err(Error::config("/data/ratios", format!("need three proportions, got {ratios:?}")));
    }
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 windows to split, got {n}")));
    }
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let exact: Vec<u64> = ratios.iter().map(|&r| r as u64 * n as u64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| (e / total) as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    // stable: ties go to the earlier part
    order.sort_by_key(|&i| std::cmp::Reverse(exact[i] % total));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = idx.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok([a.to_vec(), b.to_vec(), c.to_vec()])
}

/// Per antenna-pair scale factors `N × N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationScales {
    pub n: usize,
    pub values: Vec<f64>,
}

impl NormalizationScales {
    /// RMS complex magnitude per antenna pair over every frame of `train`
    /// (tensors whose last two axes are `2N × 2N`).
    pub fn fit(train: &[Tensor<f32>]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("normalization needs a nonempty training split".into()))?;
        let s = *first.dims().last().expect("rank >= 1");
        let n = s / 2;
        let mut energy = vec![0.0f64; n * n];
        let mut count = 0usize;
        for w in train {
            if w.dims().len() < 2 || w.dims()[w.dims().len() - 2..] != [s, s] {
                return Err(Error::shape("normalization", w.dims(), first.dims()));
            }
            for slice in w.data().chunks_exact(s * s) {
                for i in 0..n {
                    for j in 0..n {
                        let re = slice[i * s + j] as f64;
                        let im = slice[(i + n) * s + j] as f64;
                        energy[i * n + j] += re * re + im * im;
                    }
                }
                count += 1;
            }
        }
        let mut values = Vec::with_capacity(n * n);
        for (p, e) in energy.iter().enumerate() {
            let rms = (e / count as f64).sqrt();
            if !(rms > 0.0) || !rms.is_finite() {
                return Err(Error::Data(format!(
                    "antenna pair ({}, {}) has no energy in the training split",
                    p / n,
                    p % n
                )));
            }
            values.push(rms);
        }
        Ok(NormalizationScales { n, values })
    }

    pub fn scale(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Divide the four block entries of every pair by its scale.
    pub fn apply(&self, t: &mut Tensor<f32>) {
        let (n, s) = (self.n, 2 * self.n);
        for slice in t.data_mut().chunks_exact_mut(s * s) {
            for i in 0..n {
                for j in 0..n {
                    let inv = (1.0 / self.scale(i, j)) as f32;
                    for at in [i * s + j, i * s + j + n, (i + n) * s + j, (i + n) * s + j + n] {
                        slice[at] *= inv;
                    }
                }
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.n, self.n],
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("n x n")
    }
}

/// Fit scales on `train` and apply them to `train` and every other split.
pub fn antennawise_normalize(
    mut train: Vec<Tensor<f32>>,
    mut others: Vec<Vec<Tensor<f32>>>,
) -> Result<(Vec<Tensor<f32>>, Vec<Vec<Tensor<f32>>>, NormalizationScales)> {
    let scales = NormalizationScales::fit(&train)?;
    for w in train.iter_mut().chain(others.iter_mut().flatten()) {
        scales.apply(w);
    }
    Ok((train, others, scales))
}

/// Stack windows `[L, ...]` into a time-major batch `[L, B, ...]`.
pub fn time_major_batch(windows: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let l = first.dims()[0];
    let frame = first.numel() / l.max(1);
    for w in windows {
        if w.dims() != first.dims() {
            return Err(Error::shape("batch", w.dims(), first.dims()));
        }
    }
    let mut data = Vec::with_capacity(first.numel() * windows.len());
    for t in 0..l {
        for w in windows {
            data.extend_from_slice(&w.data()[t * frame..(t + 1) * frame]);
        }
    }
    let mut dims = vec![l, windows.len()];
    dims.extend_from_slice(&first.dims()[1..]);
    Tensor::new(dims, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMembership {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// JSON sidecar of a stored dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: ScenarioConfig,
    pub splits: SplitMembership,
    pub scales: Vec<Vec<f64>>,
    /// Content hash of the split and scale files.
    pub hash: String,
}

/// Preprocessed windows `[L, D, 2N, 2N]` ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub splits: SplitMembership,
    pub scales: NormalizationScales,
    pub train: Vec<Tensor<f32>>,
    pub val: Vec<Tensor<f32>>,
    pub test: Vec<Tensor<f32>>,
}

const SPLIT_FILES: [&str; 3] = ["train.csit", "val.csit", "test.csit"];
const SCALES_FILE: &str = "scales.csit";
const MANIFEST_FILE: &str = "manifest.json";

fn stack_or_empty(windows: &[Tensor<f32>], cfg: &ScenarioConfig) -> Result<Tensor<f32>> {
    if windows.is_empty() {
        let s = 2 * cfg.n_antennas;
        return Ok(Tensor::zeros(vec![0, cfg.window(), cfg.delay_taps, s, s]));
    }
    Tensor::stack(windows)
}

fn unstack(t: Tensor<f32>) -> Vec<Tensor<f32>> {
    (0..t.dims()[0]).map(|i| t.index_axis0(i)).collect()
}

/// Git-style content hash: SHA-256 over `"blob <len>\0" + bytes` per file.
pub fn content_hash<'a>(files: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for bytes in files {
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    /// Generate, map to real frames, window, split, and normalize.
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let csi = generate_synthetic(cfg)?;
        Self::from_csi(cfg, &csi)
    }

    pub fn from_csi(cfg: &ScenarioConfig, csi: &ComplexCsi) -> Result<Self> {
        cfg.validate("/data")?;
        let frames = complex_to_real(csi);
        let windows = window_slices(&frames, cfg.window());
        let [tr, va, te] = split_indices(windows.len(), &cfg.ratios, cfg.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
        let (train, mut others, scales) = antennawise_normalize(pick(&tr), vec![pick(&va), pick(&te)])?;
        let test = others.pop().expect("two");
        let val = others.pop().expect("one");
        Ok(Dataset {
            config: cfg.clone(),
            splits: SplitMembership {
                train: tr,
                val: va,
                test: te,
            },
            scales,
            train,
            val,
            test,
        })
    }

    pub fn spatial(&self) -> usize {
        2 * self.config.n_antennas
    }

    pub fn channels(&self) -> usize {
        self.config.delay_taps
    }

    fn file_bytes(&self) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        for split in [&self.train, &self.val, &self.test] {
            let t = stack_or_empty(split, &self.config)?;
            out.push(encode(&RawTensor {
                dtype: DType::F32,
                dims: t.dims().to_vec(),
                data: t.into_data(),
            })?);
        }
        let s = self.scales.to_tensor();
        out.push(encode(&RawTensor {
            dtype: DType::F32,
            dims: s.dims().to_vec(),
            data: s.into_data(),
        })?);
        Ok(out)
    }

    pub fn hash(&self) -> Result<String> {
        let files = self.file_bytes()?;
        Ok(content_hash(files.iter().map(Vec::as_slice)))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        Ok(DatasetManifest {
            config: self.config.clone(),
            splits: self.splits.clone(),
            scales: self.scales.values.chunks(self.scales.n).map(<[f64]>::to_vec).collect(),
            hash: self.hash()?,
        })
    }

    /// Write the split tensors, the scales and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        let files = self.file_bytes()?;
        let names = SPLIT_FILES.iter().chain(std::iter::once(&SCALES_FILE));
        for (name, bytes) in names.zip(&files) {
            std::fs::write(dir.join(name), bytes)?;
        }
        let manifest = DatasetManifest {
            config: self.config.clone(),
            splits: self.splits.clone(),
            scales: self.scales.values.chunks(self.scales.n).map(<[f64]>::to_vec).collect(),
            hash: content_hash(files.iter().map(Vec::as_slice)),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Load a dataset written by [`Dataset::write`], checking its hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad manifest {}: {e}", manifest_path.display())))?;
        let mut files = Vec::new();
        for name in SPLIT_FILES.iter().chain(std::iter::once(&SCALES_FILE)) {
            let path = dir.join(name);
            files.push(std::fs::read(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?);
        }
        let hash = content_hash(files.iter().map(Vec::as_slice));
        if hash != manifest.hash {
            return Err(Error::Data(format!(
                "dataset hash mismatch in {}: manifest {} vs files {hash}",
                dir.display(),
                manifest.hash
            )));
        }
        let mut splits = Vec::new();
        for bytes in &files[..3] {
            let raw = decode(bytes)?;
            splits.push(unstack(Tensor::new(raw.dims, raw.data)?));
        }
        let scales = NormalizationScales {
            n: manifest.scales.len(),
            values: manifest.scales.concat(),
        };
        let test = splits.pop().expect("3");
        let val = splits.pop().expect("2");
        let train = splits.pop().expect("1");
        Ok(Dataset {
            config: manifest.config,
            splits: manifest.splits,
            scales,
            train,
            val,
            test,
        })
    }
}
