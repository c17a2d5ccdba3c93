//! The stacked predictive model, its variant registry, rollouts and
//! complexity counters.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{ContextLstmCell, ConvLstmCell, ConvParam, GradientHighway, LayerState, StLstmCell};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseCell {
    ConvLSTM,
    STConvLSTM,
    CAConvLSTM,
}

fn default_channels() -> Vec<usize> {
    vec![128, 64, 64, 64]
}

fn default_ghu_channels() -> usize {
    128
}

fn default_kernel() -> usize {
    3
}

/// One point on the ablation axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub base: BaseCell,
    #[serde(default)]
    pub ta_enabled: bool,
    #[serde(default)]
    pub sta_enabled: bool,
    #[serde(default)]
    pub ghu_enabled: bool,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_ghu_channels")]
    pub ghu_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl VariantSpec {
    /// A variant of `base` with every optional block off and default widths.
    pub fn new(base: BaseCell) -> Self {
        VariantSpec {
            base,
            ta_enabled: false,
            sta_enabled: false,
            ghu_enabled: false,
            channels: default_channels(),
            ghu_channels: default_ghu_channels(),
            kernel: default_kernel(),
        }
    }

    /// The full model: context attention on both memories plus the highway.
    pub fn proposed() -> Self {
        VariantSpec {
            ta_enabled: true,
            sta_enabled: true,
            ghu_enabled: true,
            ..Self::new(BaseCell::CAConvLSTM)
        }
    }

    pub fn with_channels(mut self, channels: Vec<usize>, ghu_channels: usize) -> Self {
        self.channels = channels;
        self.ghu_channels = ghu_channels;
        self
    }

    /// The seven ablation rows, in table order.
    pub fn ablation_rows(channels: &[usize], ghu_channels: usize) -> Vec<VariantSpec> {
        let ca = Self::new(BaseCell::CAConvLSTM);
        let rows = [
            Self::new(BaseCell::ConvLSTM),
            Self::new(BaseCell::STConvLSTM),
            ca.clone(),
            VariantSpec {
                ta_enabled: true,
                ..ca.clone()
            },
            VariantSpec {
                sta_enabled: true,
                ..ca.clone()
            },
            VariantSpec {
                ta_enabled: true,
                sta_enabled: true,
                ..ca
            },
            Self::proposed(),
        ];
        rows.into_iter()
            .map(|v| v.with_channels(channels.to_vec(), ghu_channels))
            .collect()
    }

    /// Row label as printed in ablation tables.
    pub fn label(&self) -> String {
        match self.base {
            BaseCell::ConvLSTM => "ConvLSTM".into(),
            BaseCell::STConvLSTM => "ST-ConvLSTM".into(),
            BaseCell::CAConvLSTM => match (self.ta_enabled, self.sta_enabled, self.ghu_enabled) {
                (false, false, false) => "CA-ConvLSTM".into(),
                (true, false, false) => "+T.Atten".into(),
                (false, true, false) => "+S.T.Atten".into(),
                (true, true, false) => "+CC.Atten".into(),
                (true, true, true) => "+CC.Atten+GHU".into(),
                (ta, sta, _) => format!("CA-ConvLSTM(ta={ta},sta={sta},ghu=true)"),
            },
        }
    }

    /// Reject combinations the stack cannot express. `path` prefixes the
    /// JSON pointer of the offending field.
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                format!("{path}/channels"),
                "need at least one layer, every width positive",
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{path}/kernel"), "kernel size must be odd"));
        }
        if self.base != BaseCell::CAConvLSTM {
            for (on, key) in [
                (self.ta_enabled, "ta_enabled"),
                (self.sta_enabled, "sta_enabled"),
                (self.ghu_enabled, "ghu_enabled"),
            ] {
                if on {
                    return Err(Error::config(
                        format!("{path}/{key}"),
                        format!("{key} needs base CAConvLSTM, got {:?}", self.base),
                    ));
                }
            }
        }
        if self.ghu_enabled && self.channels.len() < 2 {
            return Err(Error::config(
                format!("{path}/ghu_enabled"),
                "the highway sits between layers 1 and 2 and needs two layers",
            ));
        }
        if self.ghu_enabled && self.ghu_channels == 0 {
            return Err(Error::config(format!("{path}/ghu_channels"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvLstmCell),
    St(StLstmCell),
    Context(ContextLstmCell),
}

/// Recurrent state threaded through a rollout.
#[derive(Clone, Debug)]
pub struct StepState {
    pub layers: Vec<LayerState>,
    /// Spatial memory leaving the top layer at the previous step.
    pub m: Option<Var>,
    pub z: Option<Var>,
}

/// A built model: architecture plus its parameter registry.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub variant: VariantSpec,
    pub input_channels: usize,
    pub spatial: usize,
    pub params: ParamStore<T>,
    input_proj: ConvParam,
    output_proj: ConvParam,
    layers: Vec<Layer>,
    ghu: Option<GradientHighway>,
}

/// Build a model for frames of `input_channels × spatial × spatial`.
pub fn build_model<T: Real>(
    variant: &VariantSpec,
    input_channels: usize,
    spatial: usize,
    seed: u64,
) -> Result<Model<T>> {
    variant.validate("/model")?;
    if input_channels == 0 {
        return Err(Error::Invalid("input_channels must be at least 1".into()));
    }
    if spatial == 0 || !spatial.is_multiple_of(2) {
        return Err(Error::Invalid(format!("spatial extent must be even and positive, got {spatial}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ch = &variant.channels;
    let k = variant.kernel;
    let memory = ch[0];
    let input_proj = ConvParam::new(&mut store, "input_proj", input_channels, ch[0], 1, &mut rng)?;
    let mut layers = Vec::with_capacity(ch.len());
    let mut ghu = None;
    for (i, &hidden) in ch.iter().enumerate() {
        let c_in = match i {
            0 => ch[0],
            1 if variant.ghu_enabled => variant.ghu_channels,
            _ => ch[i - 1],
        };
        let name = format!("layer{i}");
        layers.push(match variant.base {
            BaseCell::ConvLSTM => Layer::Conv(ConvLstmCell::new(&mut store, &name, c_in, hidden, k, &mut rng)?),
            BaseCell::STConvLSTM => {
                Layer::St(StLstmCell::new(&mut store, &name, c_in, hidden, memory, k, &mut rng)?)
            }
            BaseCell::CAConvLSTM => Layer::Context(ContextLstmCell::new(
                &mut store,
                &name,
                c_in,
                hidden,
                memory,
                k,
                variant.ta_enabled,
                variant.sta_enabled,
                &mut rng,
            )?),
        });
        if i == 0 && variant.ghu_enabled {
            ghu = Some(GradientHighway::new(&mut store, "ghu", ch[0], variant.ghu_channels, k, &mut rng)?);
        }
    }
    let top = *ch.last().expect("validated nonempty");
    let output_proj = ConvParam::new(&mut store, "output_proj", top, input_channels, 1, &mut rng)?;
    Ok(Model {
        variant: variant.clone(),
        input_channels,
        spatial,
        params: store,
        input_proj,
        output_proj,
        layers,
        ghu,
    })
}

/// Drive a recurrent `step` over `J + K − 1` steps.
///
/// Step `t` (1-based) consumes frame `t` of `frames` while `t ≤ J` and the
/// previous prediction afterwards; it predicts frame `t + 1`. Frames past
/// `J` are never read. `frames` is time-major: `[L, B, ...]`.
pub fn rollout_with<T: Real>(
    g: &mut Graph<T>,
    frames: &Tensor<T>,
    j: usize,
    k: usize,
    mut step: impl FnMut(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    let available = frames.dims().first().copied().unwrap_or(0);
    if j == 0 {
        return Err(Error::Invalid("J must be at least 1".into()));
    }
    if available < j {
        return Err(Error::Data(format!("sequence of {available} frames is shorter than J = {j}")));
    }
    let steps = j + k - 1;
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let x = if t <= j {
            g.constant(frames.index_axis0(t - 1))
        } else {
            *out.last().expect("t > j >= 1 so a prediction exists")
        };
        out.push(step(g, x)?);
    }
    Ok(out)
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            variant: self.variant.clone(),
            input_channels: self.input_channels,
            spatial: self.spatial,
            params: self.params.cast(),
            input_proj: self.input_proj.clone(),
            output_proj: self.output_proj.clone(),
            layers: self.layers.clone(),
            ghu: self.ghu.clone(),
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    fn memory_width(&self) -> usize {
        self.variant.channels[0]
    }

    fn has_memory(&self) -> bool {
        self.variant.base != BaseCell::ConvLSTM
    }

    /// All-zero initial state for a batch.
    pub fn init_state(&self, g: &mut Graph<T>, batch: usize) -> StepState {
        let s = self.spatial;
        let layers = self
            .variant
            .channels
            .iter()
            .map(|&c| LayerState::zeros(g, batch, c, s, s))
            .collect();
        let m = self
            .has_memory()
            .then(|| g.constant(Tensor::zeros(vec![batch, self.memory_width(), s, s])));
        let z = self
            .ghu
            .as_ref()
            .map(|gh| g.constant(Tensor::zeros(vec![batch, gh.channels, s, s])));
        StepState { layers, m, z }
    }

    /// One recurrent step: frame `[B, D, S, S]` in, predicted next frame out.
    pub fn step(&self, g: &mut Graph<T>, p: &Bound, x: Var, state: &mut StepState) -> Result<Var> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != self.input_channels || d[2] != self.spatial || d[3] != self.spatial {
            return Err(Error::shape(
                "model step",
                d,
                &[0, self.input_channels, self.spatial, self.spatial],
            ));
        }
        let mut input = self.input_proj.apply(g, p, x)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = state.layers[i];
            let next = match layer {
                Layer::Conv(cell) => cell.forward(g, p, input, prev)?,
                Layer::St(cell) => {
                    let (s, m) = cell.forward(g, p, input, prev, state.m.expect("memory"))?;
                    state.m = Some(m);
                    s
                }
                Layer::Context(cell) => {
                    let (s, m) = cell.forward(g, p, input, prev, state.m.expect("memory"))?;
                    state.m = Some(m);
                    s
                }
            };
            state.layers[i] = next;
            input = next.h;
            if i == 0 {
                if let Some(gh) = &self.ghu {
                    let z = gh.forward(g, p, next.h, state.z.expect("highway state"))?;
                    state.z = Some(z);
                    input = z;
                }
            }
        }
        self.output_proj.apply(g, p, input)
    }

    /// Record a rollout over time-major `frames: [L, B, D, S, S]`, returning
    /// the `J + K − 1` predictions for frames `2 … J + K`.
    pub fn rollout(&self, g: &mut Graph<T>, p: &Bound, frames: &Tensor<T>, j: usize, k: usize) -> Result<Vec<Var>> {
        let batch = match frames.dims() {
            [_, b, _, _, _] => *b,
            d => return Err(Error::shape("rollout frames", d, &[0, 0, self.input_channels, 0, 0])),
        };
        let mut state = self.init_state(g, batch);
        rollout_with(g, frames, j, k, |g, x| self.step(g, p, x, &mut state))
    }

    /// Detached predictions `[J + K − 1, B, D, S, S]` on a private graph.
    pub fn predict(&self, frames: &Tensor<T>, j: usize, k: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let preds = self.rollout(&mut g, &p, frames, j, k)?;
        let parts: Vec<Tensor<T>> = preds.iter().map(|&v| g.value(v).clone()).collect();
        Tensor::stack(&parts)
    }

    /// Analytic FLOPs of one recurrent step at `batch`.
    pub fn step_flops(&self, batch: usize) -> u64 {
        let s = self.spatial;
        let layers: u64 = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.flops(batch, s, s),
                Layer::St(c) => c.flops(batch, s, s),
                Layer::Context(c) => c.flops(batch, s, s),
            })
            .sum();
        self.input_proj.flops(batch, s, s)
            + layers
            + self.ghu.as_ref().map_or(0, |gh| gh.flops(batch, s, s))
            + self.output_proj.flops(batch, s, s)
    }

    /// Analytic FLOPs of a full rollout over a window of `len` frames
    /// (`len − 1` recurrent steps).
    pub fn count_flops(&self, batch: usize, len: usize) -> u64 {
        len.saturating_sub(1) as u64 * self.step_flops(batch)
    }
}
