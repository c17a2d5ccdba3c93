use rand::Rng;

use super::{plane, ConvParam, LayerState};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Convolutional LSTM: `i, f, o, g` from one convolution over `[X, H]`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub hidden: usize,
    pub gates: ConvParam,
}

impl ConvLstmCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = ConvParam::new(store, &format!("{name}.gates"), c_in + hidden, 4 * hidden, k, rng)?;
        gates.fill_bias(store, hidden..2 * hidden, 1.0);
        Ok(ConvLstmCell { hidden, gates })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, state: LayerState) -> Result<LayerState> {
        let xh = g.concat(&[x, state.h])?;
        let pre = self.gates.apply(g, p, xh)?;
        let parts = g.split(pre, 4)?;
        let i = g.sigmoid(parts[0]);
        let f = g.sigmoid(parts[1]);
        let o = g.sigmoid(parts[2]);
        let gg = g.tanh(parts[3]);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, gg)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LayerState { h, c })
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.gates.flops(batch, h, w) + 9 * plane(batch, self.hidden, h, w)
    }
}
