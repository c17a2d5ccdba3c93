//! Independent scalar-loop re-implementations and finite-difference checks
//! shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpredict::params::{Bound, ParamStore};
use stpredict::cells::{
    CausalLstmCell, ContextLstmCell, ConvLstmCell, GradientHighway, LayerState, SpatioTemporalAttention,
    StLstmCell, TemporalAttention,
};
use stpredict::{Graph, Real, Tensor, Var};

/// `[B, C, H, W]` map in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Map { b, c, h, w, v: vec![0.0; b * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let d = t.dims();
        Map { b: d[0], c: d[1], h: d[2], w: d[3], v: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.b, self.c, self.h, self.w], self.v.clone()).unwrap()
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, val: f64) {
        let i = ((b * self.c + c) * self.h + y) * self.w + x;
        self.v[i] = val;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.b, self.c, self.h, self.w), (o.b, o.c, o.h, o.w));
        Map { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    /// Channels `start..start + n`.
    pub fn chans(&self, start: usize, n: usize) -> Map {
        let mut out = Map::zeros(self.b, n, self.h, self.w);
        for b in 0..self.b {
            for c in 0..n {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(b, c, y, x, self.at(b, start + c, y, x));
                    }
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.dims(), &[self.b, self.c, self.h, self.w]);
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn cat(parts: &[&Map]) -> Map {
    let c: usize = parts.iter().map(|p| p.c).sum();
    let p0 = parts[0];
    let mut out = Map::zeros(p0.b, c, p0.h, p0.w);
    for b in 0..p0.b {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.c {
                for y in 0..p.h {
                    for x in 0..p.w {
                        out.set(b, base + ch, y, x, p.at(b, ch, y, x));
                    }
                }
            }
            base += p.c;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct zero-padded "same" cross-correlation.
pub fn conv(x: &Map, weight: &[f64], bias: &[f64], c_out: usize, k: usize) -> Map {
    let pad = (k - 1) / 2;
    let mut out = Map::zeros(x.b, c_out, x.h, x.w);
    for b in 0..x.b {
        for co in 0..c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = bias[co];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                s += weight[((co * x.c + ci) * k + ky) * k + kx] * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, co, y, xx, s);
                }
            }
        }
    }
    out
}

/// Parameter lookup by name.
pub struct P<'a>(pub &'a ParamStore<f64>);

impl P<'_> {
    pub fn t(&self, name: &str) -> &Tensor<f64> {
        self.0.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn conv(&self, prefix: &str, x: &Map) -> Map {
        let w = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        conv(x, w.data(), b.data(), w.dims()[0], w.dims()[2])
    }

    /// `[B, C] -> [B, Cout]` dense layer.
    pub fn dense(&self, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        let (co, ci) = (w.dims()[0], w.dims()[1]);
        x.iter()
            .map(|row| {
                (0..co)
                    .map(|o| b.data()[o] + (0..ci).map(|i| w.data()[o * ci + i] * row[i]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
}

pub fn convlstm(p: &P, name: &str, x: &Map, h: &Map, c: &Map) -> (Map, Map) {
    let hid = h.c;
    let z = p.conv(&format!("{name}.gates"), &cat(&[x, h]));
    let i = z.chans(0, hid).map(sigmoid);
    let f = z.chans(hid, hid).map(sigmoid);
    let o = z.chans(2 * hid, hid).map(sigmoid);
    let g = z.chans(3 * hid, hid).map(f64::tanh);
    let c2 = f.zip(c, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
    let h2 = o.zip(&c2.map(f64::tanh), |a, b| a * b);
    (h2, c2)
}

/// Causal LSTM update.
pub fn causal(p: &P, name: &str, x: &Map, h: &Map, c: &Map, m: &Map) -> (Map, Map, Map) {
    let hid = h.c;
    let mem = m.c;
    let z1 = p.conv(&format!("{name}.w1"), &cat(&[x, h, c]));
    let g = z1.chans(0, hid).map(f64::tanh);
    let i = z1.chans(hid, hid).map(sigmoid);
    let f = z1.chans(2 * hid, hid).map(sigmoid);
    let c2 = f.zip(c, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
    let z2 = p.conv(&format!("{name}.w2"), &cat(&[x, &c2, m]));
    let g2 = z2.chans(0, mem).map(f64::tanh);
    let i2 = z2.chans(mem, mem).map(sigmoid);
    let f2 = z2.chans(2 * mem, mem).map(sigmoid);
    let w3m = p.conv(&format!("{name}.w3"), m).map(f64::tanh);
    let m2 = f2.zip(&w3m, |a, b| a * b).zip(&i2.zip(&g2, |a, b| a * b), |a, b| a + b);
    let o = p.conv(&format!("{name}.w4"), &cat(&[x, &c2, &m2])).map(f64::tanh);
    let h2 = o.zip(&p.conv(&format!("{name}.w5"), &cat(&[&c2, &m2])).map(f64::tanh), |a, b| a * b);
    (h2, c2, m2)
}

pub fn st_lstm(p: &P, name: &str, x: &Map, h: &Map, c: &Map, m: &Map) -> (Map, Map, Map) {
    let (hid, mem) = (h.c, m.c);
    let branch = |z: Map, n: usize, old: &Map| {
        let g = z.chans(0, n).map(f64::tanh);
        let i = z.chans(n, n).map(sigmoid);
        let f = z.chans(2 * n, n).map(sigmoid);
        f.zip(old, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b)
    };
    let c2 = branch(p.conv(&format!("{name}.temporal"), &cat(&[x, h])), hid, c);
    let m2 = branch(p.conv(&format!("{name}.spatial"), &cat(&[x, m])), mem, m);
    let o = p.conv(&format!("{name}.output"), &cat(&[x, h, &c2, &m2])).map(sigmoid);
    let h2 = o.zip(&p.conv(&format!("{name}.fuse"), &cat(&[&c2, &m2])).map(f64::tanh), |a, b| a * b);
    (h2, c2, m2)
}

fn spatial_mean(x: &Map) -> Vec<Vec<f64>> {
    (0..x.b)
        .map(|b| {
            (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s += x.at(b, c, y, xx);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect()
        })
        .collect()
}

fn spatial_max(x: &Map) -> Vec<Vec<f64>> {
    (0..x.b)
        .map(|b| {
            (0..x.c)
                .map(|c| {
                    let mut s = f64::NEG_INFINITY;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s = s.max(x.at(b, c, y, xx));
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn scale_channels(x: &Map, e: &[Vec<f64>]) -> Map {
    let mut out = x.clone();
    for b in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(b, c, y, xx, x.at(b, c, y, xx) * e[b][c]);
                }
            }
        }
    }
    out
}

/// Temporal attention; returns `(output, e)`.
pub fn ta(p: &P, name: &str, x: &Map) -> (Map, Vec<Vec<f64>>) {
    let u = p.conv(&format!("{name}.wu"), x);
    let s = spatial_mean(&u);
    let hid: Vec<Vec<f64>> = p
        .dense(&format!("{name}.ws2"), &s)
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect();
    let e: Vec<Vec<f64>> = p
        .dense(&format!("{name}.ws1"), &hid)
        .into_iter()
        .map(|r| r.into_iter().map(f64::tanh).collect())
        .collect();
    (scale_channels(&u, &e), e)
}

pub fn sta(p: &P, name: &str, x: &Map) -> Map {
    let mlp = |v: Vec<Vec<f64>>| {
        let hid: Vec<Vec<f64>> = p
            .dense(&format!("{name}.mlp0"), &v)
            .into_iter()
            .map(|r| r.into_iter().map(|a| a.max(0.0)).collect())
            .collect();
        p.dense(&format!("{name}.mlp1"), &hid)
    };
    let a = mlp(spatial_mean(x));
    let m = mlp(spatial_max(x));
    let mc: Vec<Vec<f64>> = a
        .iter()
        .zip(&m)
        .map(|(ra, rm)| ra.iter().zip(rm).map(|(u, v)| sigmoid(u + v)).collect())
        .collect();
    let xc = scale_channels(x, &mc);
    let mut pooled = Map::zeros(x.b, 2, x.h, x.w);
    for b in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                let vals: Vec<f64> = (0..x.c).map(|c| xc.at(b, c, y, xx)).collect();
                pooled.set(b, 0, y, xx, vals.iter().sum::<f64>() / x.c as f64);
                pooled.set(b, 1, y, xx, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    let ms = p.conv(&format!("{name}.spatial"), &pooled).map(sigmoid);
    let mut out = xc.clone();
    for b in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(b, c, y, xx, xc.at(b, c, y, xx) * ms.at(b, 0, y, xx));
                }
            }
        }
    }
    out
}

pub fn ghu(p: &P, name: &str, x: &Map, z: &Map) -> Map {
    let pp = p
        .conv(&format!("{name}.px"), x)
        .zip(&p.conv(&format!("{name}.pz"), z), |a, b| a + b)
        .map(f64::tanh);
    let s = p
        .conv(&format!("{name}.sx"), x)
        .zip(&p.conv(&format!("{name}.sz"), z), |a, b| a + b)
        .map(sigmoid);
    let keep = s.map(|v| 1.0 - v).zip(z, |a, b| a * b);
    s.zip(&pp, |a, b| a * b).zip(&keep, |a, b| a + b)
}

/// Context LSTM: condition C and M, then the causal update.
pub fn context(p: &P, name: &str, x: &Map, h: &Map, c: &Map, m: &Map, with_ta: bool, with_sta: bool) -> (Map, Map, Map) {
    let c = if with_ta {
        let (t, _) = ta(p, &format!("{name}.ta"), c);
        c.zip(&t, |a, b| a + b)
    } else {
        c.clone()
    };
    let m = if with_sta { sta(p, &format!("{name}.sta"), m) } else { m.clone() };
    causal(p, name, x, h, &c, &m)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Map {
    Map { b, c, h, w, v: (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

/// Randomize every parameter (biases included) in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    store.map_values(|_, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    });
}

pub fn zero_params(store: &mut ParamStore<f64>) {
    store.map_values(|_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
}

/// Largest relative error between analytic and central-difference
/// gradients of `loss(store)` over every parameter element.
///
/// `loss` records a scalar on a fresh graph from the bound parameters.
pub fn fd_check(
    store: &ParamStore<f64>,
    h: f64,
    loss: impl Fn(&mut Graph<f64>, &Bound) -> Var,
) -> f64 {
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let l = loss(&mut g, &p);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let l = loss(&mut g, &p);
    g.backward(l).unwrap();
    let grads = p.grads(&g);
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        for e in 0..grad.numel() {
            let mut plus = store.clone();
            plus.values_mut()[pi].data_mut()[e] += h;
            let mut minus = store.clone();
            minus.values_mut()[pi].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.data()[e];
            let rel = (an - fd).abs() / (an.abs().max(fd.abs()).max(1e-3));
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random projection loss `Σ r ⊙ v` so every output element matters.
pub fn probe_loss(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let dims = g.dims(v).to_vec();
    let n: usize = dims.iter().product();
    let w = g.constant(Tensor::new(dims, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
    let prod = g.mul(v, w).unwrap();
    g.sum(prod)
}

/// One cell under test: a graph forward generic over precision and a
/// scalar-loop twin.
pub trait Case {
    fn name(&self) -> &'static str;
    /// Channel widths of the inputs, in order.
    fn inputs(&self) -> Vec<usize>;
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var>;
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map>;
}

pub struct Shape {
    pub b: usize,
    pub c_in: usize,
    pub hidden: usize,
    pub memory: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Shape {
    /// The 1x2x4x4 instance used for gradient checks.
    pub fn tiny() -> Self {
        Shape { b: 1, c_in: 2, hidden: 2, memory: 2, h: 4, w: 4, k: 3 }
    }

    pub fn random(r: &mut ChaCha8Rng) -> Self {
        let hidden = r.random_range(1..=4);
        Shape {
            b: r.random_range(1..=2),
            c_in: r.random_range(1..=3),
            hidden,
            memory: hidden,
            h: r.random_range(3..=6),
            w: r.random_range(3..=6),
            k: [1, 3][r.random_range(0..2)],
        }
    }
}

pub struct ConvLstmCase(pub ConvLstmCell);
pub struct CausalCase(pub CausalLstmCell);
pub struct StCase(pub StLstmCell);
pub struct TaCase(pub TemporalAttention);
pub struct StaCase(pub SpatioTemporalAttention);
pub struct GhuCase(pub GradientHighway, pub usize);
pub struct ContextCase(pub ContextLstmCell);

fn state(xs: &[Var]) -> LayerState {
    LayerState { h: xs[1], c: xs[2] }
}

impl Case for ConvLstmCase {
    fn name(&self) -> &'static str {
        "ConvLSTM"
    }
    fn inputs(&self) -> Vec<usize> {
        let c_in = self.0.gates.c_in - self.0.hidden;
        vec![c_in, self.0.hidden, self.0.hidden]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        let s = self.0.forward(g, p, xs[0], state(xs)).unwrap();
        vec![s.h, s.c]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        let (h, c) = convlstm(p, "cell", &xs[0], &xs[1], &xs[2]);
        vec![h, c]
    }
}

impl Case for CausalCase {
    fn name(&self) -> &'static str {
        "causal LSTM"
    }
    fn inputs(&self) -> Vec<usize> {
        vec![self.0.c_in, self.0.hidden, self.0.hidden, self.0.memory]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        let (s, m) = self.0.forward(g, p, xs[0], state(xs), xs[3]).unwrap();
        vec![s.h, s.c, m]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        let (h, c, m) = causal(p, "cell", &xs[0], &xs[1], &xs[2], &xs[3]);
        vec![h, c, m]
    }
}

impl Case for StCase {
    fn name(&self) -> &'static str {
        "ST-LSTM"
    }
    fn inputs(&self) -> Vec<usize> {
        let c_in = self.0.temporal.c_in - self.0.hidden;
        vec![c_in, self.0.hidden, self.0.hidden, self.0.memory]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        let (s, m) = self.0.forward(g, p, xs[0], state(xs), xs[3]).unwrap();
        vec![s.h, s.c, m]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        let (h, c, m) = st_lstm(p, "cell", &xs[0], &xs[1], &xs[2], &xs[3]);
        vec![h, c, m]
    }
}

impl Case for TaCase {
    fn name(&self) -> &'static str {
        "temporal attention"
    }
    fn inputs(&self) -> Vec<usize> {
        vec![self.0.channels]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        let (out, e) = self.0.forward_with_weights(g, p, xs[0]).unwrap();
        let d = g.dims(e).to_vec();
        let e = g.reshape(e, &[d[0], d[1], 1, 1]).unwrap();
        vec![out, e]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        let (out, e) = ta(p, "cell", &xs[0]);
        let c = e[0].len();
        let emap = Map { b: e.len(), c, h: 1, w: 1, v: e.concat() };
        vec![out, emap]
    }
}

impl Case for StaCase {
    fn name(&self) -> &'static str {
        "spatiotemporal attention"
    }
    fn inputs(&self) -> Vec<usize> {
        vec![self.0.channels]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        vec![self.0.forward(g, p, xs[0]).unwrap()]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        vec![sta(p, "cell", &xs[0])]
    }
}

impl Case for GhuCase {
    fn name(&self) -> &'static str {
        "gradient highway"
    }
    fn inputs(&self) -> Vec<usize> {
        vec![self.1, self.0.channels]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        vec![self.0.forward(g, p, xs[0], xs[1]).unwrap()]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        vec![ghu(p, "cell", &xs[0], &xs[1])]
    }
}

impl Case for ContextCase {
    fn name(&self) -> &'static str {
        "context LSTM"
    }
    fn inputs(&self) -> Vec<usize> {
        let c = &self.0.causal;
        vec![c.c_in, c.hidden, c.hidden, c.memory]
    }
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xs: &[Var]) -> Vec<Var> {
        let (s, m) = self.0.forward(g, p, xs[0], state(xs), xs[3]).unwrap();
        vec![s.h, s.c, m]
    }
    fn oracle(&self, p: &P, xs: &[Map]) -> Vec<Map> {
        let (h, c, m) = context(
            p,
            "cell",
            &xs[0],
            &xs[1],
            &xs[2],
            &xs[3],
            self.0.temporal.is_some(),
            self.0.spatial.is_some(),
        );
        vec![h, c, m]
    }
}

/// Every cell kind, built under the name `cell` with randomized parameters.
pub enum AnyCase {
    ConvLstm(ConvLstmCase),
    Causal(CausalCase),
    St(StCase),
    Ta(TaCase),
    Sta(StaCase),
    Ghu(GhuCase),
    Context(ContextCase),
}

pub const CASE_KINDS: usize = 7;

pub fn build_case(kind: usize, s: &Shape, r: &mut ChaCha8Rng) -> (AnyCase, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let st = &mut store;
    let case = match kind {
        0 => AnyCase::ConvLstm(ConvLstmCase(ConvLstmCell::new(st, "cell", s.c_in, s.hidden, s.k, r).unwrap())),
        1 => AnyCase::Causal(CausalCase(CausalLstmCell::new(st, "cell", s.c_in, s.hidden, s.memory, s.k, r).unwrap())),
        2 => AnyCase::St(StCase(StLstmCell::new(st, "cell", s.c_in, s.hidden, s.memory, s.k, r).unwrap())),
        3 => AnyCase::Ta(TaCase(TemporalAttention::new(st, "cell", s.hidden, s.k, r).unwrap())),
        4 => AnyCase::Sta(StaCase(SpatioTemporalAttention::new(st, "cell", s.memory, r).unwrap())),
        5 => AnyCase::Ghu(GhuCase(GradientHighway::new(st, "cell", s.c_in, s.hidden, s.k, r).unwrap(), s.c_in)),
        _ => AnyCase::Context(ContextCase(
            ContextLstmCell::new(st, "cell", s.c_in, s.hidden, s.memory, s.k, true, true, r).unwrap(),
        )),
    };
    randomize(&mut store, r, 0.6);
    (case, store)
}

macro_rules! dispatch {
    ($any:expr, $c:ident => $body:expr) => {
        match $any {
            AnyCase::ConvLstm($c) => $body,
            AnyCase::Causal($c) => $body,
            AnyCase::St($c) => $body,
            AnyCase::Ta($c) => $body,
            AnyCase::Sta($c) => $body,
            AnyCase::Ghu($c) => $body,
            AnyCase::Context($c) => $body,
        }
    };
}

impl AnyCase {
    pub fn name(&self) -> &'static str {
        dispatch!(self, c => c.name())
    }

    pub fn random_inputs(&self, s: &Shape, r: &mut ChaCha8Rng) -> Vec<Map> {
        let widths = dispatch!(self, c => c.inputs());
        widths.into_iter().map(|c| random_map(r, s.b, c, s.h, s.w)).collect()
    }

    /// Graph outputs at precision `T`, returned in f64.
    pub fn run<T: Real>(&self, store: &ParamStore<f64>, xs: &[Map]) -> Vec<Tensor<f64>> {
        let store = store.cast::<T>();
        let mut g = Graph::<T>::new();
        let p = store.bind(&mut g);
        let vars: Vec<Var> = xs.iter().map(|m| g.constant(m.to_tensor().cast())).collect();
        let outs = dispatch!(self, c => c.forward(&mut g, &p, &vars));
        outs.into_iter().map(|v| g.value(v).cast()).collect()
    }

    pub fn oracle(&self, store: &ParamStore<f64>, xs: &[Map]) -> Vec<Map> {
        dispatch!(self, c => c.oracle(&P(store), xs))
    }

    /// Worst absolute gap between the f32 graph and the f64 scalar loops.
    pub fn oracle_gap(&self, store: &ParamStore<f64>, xs: &[Map]) -> f64 {
        let got = self.run::<f32>(store, xs);
        let want = self.oracle(store, xs);
        got.iter().zip(&want).map(|(g, w)| w.max_abs_diff(g)).fold(0.0, f64::max)
    }

    /// Worst relative FD error over parameters and inputs.
    pub fn grad_check(&self, store: &ParamStore<f64>, xs: &[Map], h: f64) -> f64 {
        let mut store = store.clone();
        let ids: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, m)| store.add(format!("input{i}"), m.to_tensor()).unwrap())
            .collect();
        fd_check(&store, h, |g, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| p.var(id)).collect();
            let outs = dispatch!(self, c => c.forward(g, p, &vars));
            let mut total = None;
            for (i, o) in outs.into_iter().enumerate() {
                let l = probe_loss(g, o, 100 + i as u64);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l).unwrap(),
                });
            }
            total.unwrap()
        })
    }
}

/// Closed-form parameter count of a built model, summed by hand from the
/// layer formulas.
pub fn closed_form_params(v: &stpredict::network::VariantSpec, d: usize) -> usize {
    use stpredict::network::BaseCell;
    let k = v.kernel;
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let aff = |ci: usize, co: usize| ci * co + co;
    let ch = &v.channels;
    let m = ch[0];
    let mut total = conv(d, ch[0], 1) + conv(*ch.last().unwrap(), d, 1);
    for (i, &h) in ch.iter().enumerate() {
        let cin = match i {
            0 => ch[0],
            1 if v.ghu_enabled => v.ghu_channels,
            _ => ch[i - 1],
        };
        total += match v.base {
            BaseCell::ConvLSTM => conv(cin + h, 4 * h, k),
            BaseCell::STConvLSTM => {
                conv(cin + h, 3 * h, k) + conv(cin + m, 3 * m, k) + conv(cin + 2 * h + m, h, k) + conv(h + m, h, 1)
            }
            BaseCell::CAConvLSTM => {
                let causal = conv(cin + 2 * h, 3 * h, k)
                    + conv(cin + h + m, 3 * m, k)
                    + conv(m, m, 1)
                    + conv(cin + h + m, h, k)
                    + conv(h + m, h, 1);
                let r = (h / 4).max(1);
                let ta = if v.ta_enabled { conv(h, h, k) + aff(h, r) + aff(r, h) } else { 0 };
                let r8 = (m / 8).max(1);
                let sta = if v.sta_enabled { aff(m, r8) + aff(r8, m) + conv(2, 1, 7) } else { 0 };
                causal + ta + sta
            }
        };
    }
    if v.ghu_enabled {
        total += 2 * conv(ch[0], v.ghu_channels, k) + 2 * conv(v.ghu_channels, v.ghu_channels, k);
    }
    total
}

/// One random two-parameter regression instance for the teacher/student
/// feedback check.
pub struct ToyInstance {
    pub teacher: [f64; 2],
    pub student: [f64; 2],
    pub labeled: stpredict::training::ToyBatch,
    pub unlabeled: stpredict::training::ToyBatch,
}

impl ToyInstance {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let mut pt = || [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let (teacher, student, truth) = (pt(), pt(), pt());
        let mut xs = |n: usize| (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect::<Vec<[f64; 2]>>();
        let xl = xs(8);
        let xu = xs(8);
        let yl = xl.iter().map(|x| truth[0] * x[0] + truth[1] * x[1]).collect();
        ToyInstance {
            teacher,
            student,
            labeled: stpredict::training::ToyBatch { x: xl, y: yl },
            unlabeled: stpredict::training::ToyBatch { x: xu, y: Vec::new() },
        }
    }

    /// Labeled loss of the student after one SGD step on the teacher's
    /// pseudo labels, written out by hand.
    pub fn inner_outcome(&self, teacher: [f64; 2], eta: f64) -> f64 {
        let dot = |a: [f64; 2], x: &[f64; 2]| a[0] * x[0] + a[1] * x[1];
        let n = self.unlabeled.x.len() as f64;
        let mut g = [0.0; 2];
        for x in &self.unlabeled.x {
            let r = dot(self.student, x) - dot(teacher, x);
            g[0] += 2.0 * r * x[0] / n;
            g[1] += 2.0 * r * x[1] / n;
        }
        let s = [self.student[0] - eta * g[0], self.student[1] - eta * g[1]];
        let m = self.labeled.x.len() as f64;
        self.labeled.x.iter().zip(&self.labeled.y).map(|(x, y)| (dot(s, x) - y).powi(2) / m).sum()
    }

    /// Central finite differences of [`Self::inner_outcome`] in the teacher.
    pub fn bilevel_gradient(&self, eta: f64) -> [f64; 2] {
        let h = 1e-5;
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let (mut a, mut b) = (self.teacher, self.teacher);
            a[i] += h;
            b[i] -= h;
            *o = (self.inner_outcome(a, eta) - self.inner_outcome(b, eta)) / (2.0 * h);
        }
        out
    }
}

/// Instances out of `n` whose feedback term points along the bilevel
/// gradient.
pub fn toy_sign_agreement(n: usize, seed: u64) -> usize {
    use stpredict::training::{teacher_feedback, LinearToy, MetaConfig};
    let cfg = MetaConfig { feedback_clip: f64::INFINITY, ..MetaConfig::default() };
    let mut r = rng(seed);
    (0..n)
        .filter(|_| {
            let inst = ToyInstance::random(&mut r);
            let fb = teacher_feedback(
                &LinearToy::new(inst.teacher),
                &LinearToy::new(inst.student),
                &inst.labeled,
                &inst.unlabeled,
                &cfg,
            )
            .unwrap();
            let exact = inst.bilevel_gradient(cfg.student_lr);
            match fb.teacher_grad {
                Some(g) => {
                    let g = g[0].data();
                    g[0] * exact[0] + g[1] * exact[1] > 0.0
                }
                None => false,
            }
        })
        .count()
}
