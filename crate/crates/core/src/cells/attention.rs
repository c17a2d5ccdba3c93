//! Memory attentions: channel recalibration for the temporal memory and a
//! channel-then-spatial block for the spatial memory.

use rand::Rng;

use super::{plane, AffineParam, ConvParam};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, PoolAxis, PoolKind, Real, Var};

/// Temporal attention: `e · U` with `U = W_u * X` and
/// `e = tanh(W_s1 σ(W_s2 s))`, `s` the spatial mean of `U` per channel.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub channels: usize,
    pub modulation: ConvParam,
    /// `W_s2`: channels → channels / 4
    pub squeeze: AffineParam,
    /// `W_s1`: channels / 4 → channels
    pub expand: AffineParam,
}

impl TemporalAttention {
    pub fn hidden_width(channels: usize) -> usize {
        (channels / 4).max(1)
    }

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let r = Self::hidden_width(channels);
        Ok(TemporalAttention {
            channels,
            modulation: ConvParam::new(store, &format!("{name}.wu"), channels, channels, k, rng)?,
            squeeze: AffineParam::new(store, &format!("{name}.ws2"), channels, r, rng)?,
            expand: AffineParam::new(store, &format!("{name}.ws1"), r, channels, rng)?,
        })
    }

    /// Returns `(output, e)` where `e` is the `[B, C]` channel weighting.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let u = self.modulation.apply(g, p, x)?;
        let b = g.dims(u)[0];
        let s = g.pool(u, PoolKind::Avg, PoolAxis::Spatial)?;
        let s = g.reshape(s, &[b, self.channels])?;
        let hidden = self.squeeze.apply(g, p, s)?;
        let hidden = g.sigmoid(hidden);
        let e = self.expand.apply(g, p, hidden)?;
        let e = g.tanh(e);
        Ok((g.channel_mul(u, e)?, e))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let c = plane(batch, self.channels, h, w);
        let r = Self::hidden_width(self.channels);
        self.modulation.flops(batch, h, w)
            + c
            + self.squeeze.flops(batch)
            + (batch * r) as u64
            + self.expand.flops(batch)
            + (batch * self.channels) as u64
            + c
    }
}

/// Spatiotemporal attention: a shared-MLP channel map followed by a 7×7
/// spatial map, both sigmoid-gated.
#[derive(Clone, Debug)]
pub struct SpatioTemporalAttention {
    pub channels: usize,
    pub mlp_in: AffineParam,
    pub mlp_out: AffineParam,
    pub spatial: ConvParam,
}

impl SpatioTemporalAttention {
    pub const REDUCTION: usize = 8;
    pub const SPATIAL_KERNEL: usize = 7;

    pub fn hidden_width(channels: usize) -> usize {
        (channels / Self::REDUCTION).max(1)
    }

    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let r = Self::hidden_width(channels);
        Ok(SpatioTemporalAttention {
            channels,
            mlp_in: AffineParam::new(store, &format!("{name}.mlp0"), channels, r, rng)?,
            mlp_out: AffineParam::new(store, &format!("{name}.mlp1"), r, channels, rng)?,
            spatial: ConvParam::new(store, &format!("{name}.spatial"), 2, 1, Self::SPATIAL_KERNEL, rng)?,
        })
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let hdn = self.mlp_in.apply(g, p, v)?;
        let hdn = g.relu(hdn);
        self.mlp_out.apply(g, p, hdn)
    }

    /// Returns `(output, channel_map [B,C], spatial_map [B,1,H,W])`.
    pub fn forward_with_maps<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        let b = g.dims(x)[0];
        let avg = g.pool(x, PoolKind::Avg, PoolAxis::Spatial)?;
        let avg = g.reshape(avg, &[b, self.channels])?;
        let mx = g.pool(x, PoolKind::Max, PoolAxis::Spatial)?;
        let mx = g.reshape(mx, &[b, self.channels])?;
        let a = self.mlp(g, p, avg)?;
        let m = self.mlp(g, p, mx)?;
        let logits = g.add(a, m)?;
        let channel_map = g.sigmoid(logits);
        let xc = g.channel_mul(x, channel_map)?;

        let ca = g.pool(xc, PoolKind::Avg, PoolAxis::Channel)?;
        let cm = g.pool(xc, PoolKind::Max, PoolAxis::Channel)?;
        let both = g.concat(&[ca, cm])?;
        let s = self.spatial.apply(g, p, both)?;
        let spatial_map = g.sigmoid(s);
        Ok((g.pixel_mul(xc, spatial_map)?, channel_map, spatial_map))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_maps(g, p, x)?.0)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let full = plane(batch, self.channels, h, w);
        let r = Self::hidden_width(self.channels);
        let mlp = self.mlp_in.flops(batch) + (batch * r) as u64 + self.mlp_out.flops(batch);
        let vec = (batch * self.channels) as u64;
        2 * full + 2 * mlp + 2 * vec + full + 2 * full + self.spatial.flops(batch, h, w) + plane(batch, 1, h, w) + full
    }
}
