//! Geometry-flavoured sum-of-paths CSI generator.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ComplexCsi, Scenario, ScenarioConfig};
use crate::error::Result;

/// Half-width (in taps) of the raised-cosine delay envelope.
const TAP_HALF_WIDTH: f64 = 2.0;
/// Fade length (bursts) when a path is born or dies.
const FADE_BURSTS: f64 = 20.0;

/// One incarnation of a propagation path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathInfo {
    /// Complex gain `(re, im)`.
    pub gain: (f64, f64),
    /// Delay in taps.
    pub delay: f64,
    pub doppler_hz: f64,
    pub theta_tx: f64,
    pub theta_rx: f64,
    /// Angular drift per moving burst, radians.
    pub drift_tx: f64,
    pub drift_rx: f64,
    /// Active burst range `[start, end)`; fades in and out at the ends.
    pub start: f64,
    pub end: f64,
}

/// Raised-cosine tap envelope.
pub fn tap_envelope(x: f64) -> f64 {
    if x.abs() >= TAP_HALF_WIDTH {
        0.0
    } else {
        0.5 * (1.0 + (PI * x / TAP_HALF_WIDTH).cos())
    }
}

/// Uniform-circular-array phase of element `i` of `n` for arrival angle
/// `theta`, with adjacent elements half a wavelength apart.
pub fn uca_phase(theta: f64, i: usize, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let radius_wl = 0.25 / (PI / n as f64).sin();
    2.0 * PI * radius_wl * (theta - 2.0 * PI * i as f64 / n as f64).cos()
}

fn activity(p: &PathInfo, t: f64, churn: bool) -> f64 {
    if !churn {
        return 1.0;
    }
    if t < p.start || t >= p.end {
        return 0.0;
    }
    let edge = (t - p.start).min(p.end - t);
    if edge >= FADE_BURSTS {
        1.0
    } else {
        0.5 * (1.0 - (PI * edge / FADE_BURSTS).cos())
    }
}

/// Draw the path population of `cfg`.
pub fn draw_paths(cfg: &ScenarioConfig) -> Vec<PathInfo> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid sigma");
    let nu = cfg.max_doppler();
    let drift = cfg.drift();
    let taps = cfg.delay_taps as f64;
    let total = cfg.bursts as f64;
    let mut paths = Vec::new();
    for _ in 0..cfg.n_paths {
        let mut start = if cfg.path_churn {
            -rng.random_range(0.0..300.0)
        } else {
            0.0
        };
        loop {
            let end = if cfg.path_churn {
                start + rng.random_range(200.0..600.0)
            } else {
                total
            };
            let delay = rng.random_range(0.0..taps.max(1.0) - 1.0 + f64::EPSILON);
            let decay = (-delay / (0.5 * taps.max(1.0))).exp();
            let draw_drift = |rng: &mut ChaCha8Rng| {
                if drift > 0.0 {
                    rng.random_range(-drift..drift)
                } else {
                    0.0
                }
            };
            let drift_tx = draw_drift(&mut rng);
            let drift_rx = draw_drift(&mut rng);
            paths.push(PathInfo {
                gain: (normal.sample(&mut rng) * decay, normal.sample(&mut rng) * decay),
                delay,
                doppler_hz: if nu > 0.0 { rng.random_range(-nu..nu) } else { 0.0 },
                theta_tx: rng.random_range(0.0..2.0 * PI),
                theta_rx: rng.random_range(0.0..2.0 * PI),
                drift_tx,
                drift_rx: if cfg.scenario == Scenario::S2StaticRx {
                    0.0
                } else {
                    drift_rx
                },
                start,
                end,
            });
            if end >= total {
                break;
            }
            // the successor fades in while this incarnation fades out
            start = end - FADE_BURSTS;
        }
    }
    paths
}

/// Render the channel of `cfg` over `cfg.bursts` bursts.
pub fn generate_synthetic(cfg: &ScenarioConfig) -> Result<ComplexCsi> {
    cfg.validate("/data")?;
    Ok(render(cfg, &draw_paths(cfg)))
}

/// Render a given path population.
pub fn render(cfg: &ScenarioConfig, paths: &[PathInfo]) -> ComplexCsi {
    let (t_len, d_len, n) = (cfg.bursts, cfg.delay_taps, cfg.n_antennas);
    let mut acc = vec![0.0f64; 2 * t_len * d_len * n * n];
    let dt = cfg.burst_interval_s;
    let moving: Vec<bool> = (0..t_len).map(|t| !cfg.is_stationary(t)).collect();

    // per-path clock: advances only during moving bursts
    let mut phase = vec![0.0f64; paths.len()];
    let mut steps = vec![0.0f64; paths.len()];
    let mut tx = vec![0.0f64; n];
    let mut rx = vec![0.0f64; n];
    for t in 0..t_len {
        if t > 0 && moving[t] {
            for (pi, p) in paths.iter().enumerate() {
                phase[pi] += 2.0 * PI * p.doppler_hz * dt;
                steps[pi] += 1.0;
            }
        }
        for (pi, p) in paths.iter().enumerate() {
            let act = activity(p, t as f64, cfg.path_churn);
            if act == 0.0 {
                continue;
            }
            let (th_tx, th_rx) = (p.theta_tx + p.drift_tx * steps[pi], p.theta_rx + p.drift_rx * steps[pi]);
            for i in 0..n {
                tx[i] = uca_phase(th_tx, i, n);
                rx[i] = uca_phase(th_rx, i, n);
            }
            for d in 0..d_len {
                let env = act * tap_envelope(d as f64 - p.delay);
                if env == 0.0 {
                    continue;
                }
                let (gr, gi) = (p.gain.0 * env, p.gain.1 * env);
                for i in 0..n {
                    for j in 0..n {
                        let (s, c) = (phase[pi] + tx[i] + rx[j]).sin_cos();
                        let at = 2 * (((t * d_len + d) * n + i) * n + j);
                        acc[at] += gr * c - gi * s;
                        acc[at + 1] += gr * s + gi * c;
                    }
                }
            }
        }
    }
    ComplexCsi {
        dims: [t_len, d_len, n, n],
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}
