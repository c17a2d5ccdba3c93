use rand::Rng;

use super::{plane, ConvParam, LayerState};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Causal LSTM with cascaded temporal memory `C` and spatial memory `M`.
///
/// ```text
/// (g, i, f)    = (tanh, σ, σ) W1 * [X, H, C]
/// C'           = f ⊙ C + i ⊙ g
/// (g', i', f') = (tanh, σ, σ) W2 * [X, C', M_in]
/// M'           = f' ⊙ tanh(W3 * M_in) + i' ⊙ g'
/// o            = tanh(W4 * [X, C', M'])
/// H'           = o ⊙ tanh(W5 * [C', M'])
/// ```
///
/// `W3` and `W5` are 1×1. The output gate uses `tanh`, not `σ`.
#[derive(Clone, Debug)]
pub struct CausalLstmCell {
    pub c_in: usize,
    pub hidden: usize,
    pub memory: usize,
    pub w1: ConvParam,
    pub w2: ConvParam,
    pub w3: ConvParam,
    pub w4: ConvParam,
    pub w5: ConvParam,
}

impl CausalLstmCell {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        memory: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = ConvParam::new(store, &format!("{name}.w1"), c_in + 2 * hidden, 3 * hidden, k, rng)?;
        let w2 = ConvParam::new(
            store,
            &format!("{name}.w2"),
            c_in + hidden + memory,
            3 * memory,
            k,
            rng,
        )?;
        let w3 = ConvParam::new(store, &format!("{name}.w3"), memory, memory, 1, rng)?;
        let w4 = ConvParam::new(store, &format!("{name}.w4"), c_in + hidden + memory, hidden, k, rng)?;
        let w5 = ConvParam::new(store, &format!("{name}.w5"), hidden + memory, hidden, 1, rng)?;
        w1.fill_bias(store, 2 * hidden..3 * hidden, 1.0);
        w2.fill_bias(store, 2 * memory..3 * memory, 1.0);
        Ok(CausalLstmCell {
            c_in,
            hidden,
            memory,
            w1,
            w2,
            w3,
            w4,
            w5,
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
        let xhc = g.concat(&[x, state.h, state.c])?;
        let pre = self.w1.apply(g, p, xhc)?;
        let gates = g.split(pre, 3)?;
        let gt = g.tanh(gates[0]);
        let it = g.sigmoid(gates[1]);
        let ft = g.sigmoid(gates[2]);
        let keep = g.mul(ft, state.c)?;
        let write = g.mul(it, gt)?;
        let c = g.add(keep, write)?;

        let xcm = g.concat(&[x, c, m_in])?;
        let pre2 = self.w2.apply(g, p, xcm)?;
        let gates2 = g.split(pre2, 3)?;
        let gt2 = g.tanh(gates2[0]);
        let it2 = g.sigmoid(gates2[1]);
        let ft2 = g.sigmoid(gates2[2]);
        let fused = self.w3.apply(g, p, m_in)?;
        let fused = g.tanh(fused);
        let keep2 = g.mul(ft2, fused)?;
        let write2 = g.mul(it2, gt2)?;
        let m = g.add(keep2, write2)?;

        let xcm2 = g.concat(&[x, c, m])?;
        let o = self.w4.apply(g, p, xcm2)?;
        let o = g.tanh(o);
        let cm = g.concat(&[c, m])?;
        let mix = self.w5.apply(g, p, cm)?;
        let mix = g.tanh(mix);
        let h = g.mul(o, mix)?;
        Ok((LayerState { h, c }, m))
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        [&self.w1, &self.w2, &self.w3, &self.w4, &self.w5]
            .iter()
            .map(|c| c.flops(batch, h, w))
            .sum::<u64>()
            + 9 * plane(batch, self.hidden, h, w)
            + 7 * plane(batch, self.memory, h, w)
    }
}
