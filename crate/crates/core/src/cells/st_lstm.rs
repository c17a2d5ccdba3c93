use rand::Rng;

use super::{plane, ConvParam, LayerState};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Spatiotemporal LSTM baseline with parallel (non-cascaded) memories.
///
/// `C` is gated from `[X, H]`, `M` from `[X, M_in]`; the output gate sees
/// both updated memories and `H` mixes them through a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct StLstmCell {
    pub hidden: usize,
    pub memory: usize,
    pub temporal: ConvParam,
    pub spatial: ConvParam,
    pub output: ConvParam,
    pub fuse: ConvParam,
}

impl StLstmCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        memory: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let temporal = ConvParam::new(store, &format!("{name}.temporal"), c_in + hidden, 3 * hidden, k, rng)?;
        let spatial = ConvParam::new(store, &format!("{name}.spatial"), c_in + memory, 3 * memory, k, rng)?;
        let output = ConvParam::new(
            store,
            &format!("{name}.output"),
            c_in + 2 * hidden + memory,
            hidden,
            k,
            rng,
        )?;
        let fuse = ConvParam::new(store, &format!("{name}.fuse"), hidden + memory, hidden, 1, rng)?;
        temporal.fill_bias(store, 2 * hidden..3 * hidden, 1.0);
        spatial.fill_bias(store, 2 * memory..3 * memory, 1.0);
        Ok(StLstmCell {
            hidden,
            memory,
            temporal,
            spatial,
            output,
            fuse,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        state: LayerState,
        m_in: Var,
    ) -> Result<(LayerState, Var)> {
        let xh = g.concat(&[x, state.h])?;
        let c = self.branch(g, p, &self.temporal, xh, state.c)?;
        let xm = g.concat(&[x, m_in])?;
        let m = self.branch(g, p, &self.spatial, xm, m_in)?;

        let all = g.concat(&[x, state.h, c, m])?;
        let o = self.output.apply(g, p, all)?;
        let o = g.sigmoid(o);
        let cm = g.concat(&[c, m])?;
        let mix = self.fuse.apply(g, p, cm)?;
        let mix = g.tanh(mix);
        let h = g.mul(o, mix)?;
        Ok((LayerState { h, c }, m))
    }

    fn branch<T: Real>(&self, g: &mut Graph<T>, p: &Bound, conv: &ConvParam, input: Var, memory: Var) -> Result<Var> {
        let pre = conv.apply(g, p, input)?;
        let parts = g.split(pre, 3)?;
        let gg = g.tanh(parts[0]);
        let i = g.sigmoid(parts[1]);
        let f = g.sigmoid(parts[2]);
        let keep = g.mul(f, memory)?;
        let write = g.mul(i, gg)?;
        g.add(keep, write)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        [&self.temporal, &self.spatial, &self.output, &self.fuse]
            .iter()
            .map(|c| c.flops(batch, h, w))
            .sum::<u64>()
            + 9 * plane(batch, self.hidden, h, w)
            + 6 * plane(batch, self.memory, h, w)
    }
}
