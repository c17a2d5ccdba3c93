use rand::Rng;

use super::{plane, ConvParam};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Gradient highway unit.
///
/// ```text
/// P = tanh(W_px * X + W_pz * Z)
/// S = σ(W_sx * X + W_sz * Z)
/// Z' = S ⊙ P + (1 − S) ⊙ Z
/// ```
#[derive(Clone, Debug)]
pub struct GradientHighway {
    pub channels: usize,
    pub px: ConvParam,
    pub pz: ConvParam,
    pub sx: ConvParam,
    pub sz: ConvParam,
}

impl GradientHighway {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GradientHighway {
            channels,
            px: ConvParam::new(store, &format!("{name}.px"), c_in, channels, k, rng)?,
            pz: ConvParam::new(store, &format!("{name}.pz"), channels, channels, k, rng)?,
            sx: ConvParam::new(store, &format!("{name}.sx"), c_in, channels, k, rng)?,
            sz: ConvParam::new(store, &format!("{name}.sz"), channels, channels, k, rng)?,
        })
    }

    /// Returns `(Z', P, S)`.
    pub fn forward_parts<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, z: Var) -> Result<(Var, Var, Var)> {
        let a = self.px.apply(g, p, x)?;
        let b = self.pz.apply(g, p, z)?;
        let pre_p = g.add(a, b)?;
        let pt = g.tanh(pre_p);
        let a = self.sx.apply(g, p, x)?;
        let b = self.sz.apply(g, p, z)?;
        let pre_s = g.add(a, b)?;
        let st = g.sigmoid(pre_s);
        let take = g.mul(st, pt)?;
        let rest = g.one_minus(st);
        let carry = g.mul(rest, z)?;
        Ok((g.add(take, carry)?, pt, st))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, z: Var) -> Result<Var> {
        Ok(self.forward_parts(g, p, x, z)?.0)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        [&self.px, &self.pz, &self.sx, &self.sz]
            .iter()
            .map(|c| c.flops(batch, h, w))
            .sum::<u64>()
            + 9 * plane(batch, self.channels, h, w)
    }
}
