use rand::Rng;

use super::{CausalLstmCell, LayerState, SpatioTemporalAttention, TemporalAttention};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Causal LSTM whose memories are conditioned before each step:
/// `C ← C + TA(C)` and `M ← STA(M)`. Either attention may be disabled,
/// which leaves the corresponding memory untouched.
#[derive(Clone, Debug)]
pub struct ContextLstmCell {
    pub causal: CausalLstmCell,
    pub temporal: Option<TemporalAttention>,
    pub spatial: Option<SpatioTemporalAttention>,
}

impl ContextLstmCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        memory: usize,
        k: usize,
        ta: bool,
        sta: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let causal = CausalLstmCell::new(store, name, c_in, hidden, memory, k, rng)?;
        let temporal = if ta {
            Some(TemporalAttention::new(store, &format!("{name}.ta"), hidden, k, rng)?)
        } else {
            None
        };
        let spatial = if sta {
            Some(SpatioTemporalAttention::new(store, &format!("{name}.sta"), memory, rng)?)
        } else {
            None
        };
        Ok(ContextLstmCell {
            causal,
            temporal,
            spatial,
        })
    }

    /// The conditioned `(state, M)` fed to the causal update.
    pub fn condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: LayerState,
        m_prev: Var,
    ) -> Result<(LayerState, Var)> {
        let c = match &self.temporal {
            Some(ta) => {
                let ctx = ta.forward(g, p, state.c)?;
                g.add(state.c, ctx)?
            }
            None => state.c,
        };
        let m = match &self.spatial {
            Some(sta) => sta.forward(g, p, m_prev)?,
            None => m_prev,
        };
        Ok((LayerState { h: state.h, c }, m))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        state: LayerState,
        m_prev: Var,
    ) -> Result<(LayerState, Var)> {
        let (state, m) = self.condition(g, p, state, m_prev)?;
        self.causal.forward(g, p, x, state, m)
    }

    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let ta = self.temporal.as_ref().map_or(0, |ta| {
            ta.flops(batch, h, w) + super::plane(batch, self.causal.hidden, h, w)
        });
        let sta = self.spatial.as_ref().map_or(0, |s| s.flops(batch, h, w));
        self.causal.flops(batch, h, w) + ta + sta
    }
}
