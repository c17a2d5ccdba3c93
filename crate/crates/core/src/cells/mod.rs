//! Recurrent building blocks and the two memory attentions.
//!
//! Every cell registers its kernels in a [`ParamStore`] under a name prefix
//! and evaluates on a [`Graph`] through the [`Bound`] handles of that store.
//! Gate convolutions use "same" padding so the spatial extent never changes.

mod attention;
mod causal;
mod context;
mod convlstm;
mod ghu;
mod st_lstm;

pub use attention::{SpatioTemporalAttention, TemporalAttention};
pub use causal::CausalLstmCell;
pub use context::ContextLstmCell;
pub use convlstm::ConvLstmCell;
pub use ghu::GradientHighway;
pub use st_lstm::StLstmCell;

use rand::Rng;

use crate::error::Result;
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Per-layer recurrent state `{H, C}`.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

impl LayerState {
    pub fn zeros<T: Real>(g: &mut Graph<T>, batch: usize, channels: usize, h: usize, w: usize) -> Self {
        let hv = g.constant(Tensor::zeros(vec![batch, channels, h, w]));
        let cv = g.constant(Tensor::zeros(vec![batch, channels, h, w]));
        LayerState { h: hv, c: cv }
    }
}

/// A biased convolution `[Cout, Cin, k, k]` applied with same padding.
#[derive(Clone, Debug)]
pub struct ConvParam {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvParam {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::new(vec![c_out, c_in, k, k], uniform(rng, c_out * fan_in, bound))?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
        Ok(ConvParam {
            weight,
            bias,
            c_in,
            c_out,
            k,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), (self.k - 1) / 2)
    }

    /// Set the bias of output channels `range` to `value`.
    pub fn fill_bias<T: Real>(&self, store: &mut ParamStore<T>, range: std::ops::Range<usize>, value: f64) {
        for b in &mut store.get_mut(self.bias).data_mut()[range] {
            *b = T::from_f64_lossy(value);
        }
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let px = (batch * h * w) as u64;
        2 * (self.k * self.k * self.c_in * self.c_out) as u64 * px + self.c_out as u64 * px
    }

    pub fn count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k + self.c_out
    }
}

/// A dense layer `weight: [Cout, Cin]`, `bias: [Cout]`.
#[derive(Clone, Debug)]
pub struct AffineParam {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl AffineParam {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = Tensor::new(vec![c_out, c_in], uniform(rng, c_out * c_in, bound))?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
        Ok(AffineParam {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p.var(self.weight), p.var(self.bias))
    }

    pub fn flops(&self, batch: usize) -> u64 {
        (2 * batch * self.c_in * self.c_out + batch * self.c_out) as u64
    }

    pub fn count(&self) -> usize {
        self.c_out * self.c_in + self.c_out
    }
}

/// Elements of a `[B, C, H, W]` map.
pub(crate) fn plane(batch: usize, c: usize, h: usize, w: usize) -> u64 {
    (batch * c * h * w) as u64
}
