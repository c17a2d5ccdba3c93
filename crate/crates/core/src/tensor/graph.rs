//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. [`Graph::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because inputs always exist before the op that consumes them.

use super::conv::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// `[B,C,H,W] -> [B,C,1,1]`
    Spatial,
    /// `[B,C,H,W] -> [B,1,H,W]`
    Channel,
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Binary(BinOp, Var, Var),
    Scale(Var, T),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        axis: PoolAxis,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelMul {
        x: Var,
        scale: Var,
    },
    PixelMul {
        x: Var,
        map: Var,
    },
    Reshape(Var),
    Sum(Var),
    SqErr {
        pred: Var,
        target: Var,
        sample_weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A tape of tensor operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(dims: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match dims {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, dims, &[0, 0, 0, 0])),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating point operations performed by the ops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: BinOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_dims = if av.dims() == bv.dims() || bv.numel() == 1 {
            av.dims().to_vec()
        } else if av.numel() == 1 {
            bv.dims().to_vec()
        } else {
            return Err(Error::shape(name, av.dims(), bv.dims()));
        };
        let n = out_dims.iter().product::<usize>();
        let (ad, bd) = (av.data(), bv.data());
        let (sa, sb) = (ad.len() > 1, bd.len() > 1);
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        let data = (0..n)
            .map(|i| f(ad[if sa { i } else { 0 }], bd[if sb { i } else { 0 }]))
            .collect();
        self.flops += n as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_dims, data)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = {
            let x = &self.nodes[a.0].value;
            Tensor::new(x.dims().to_vec(), x.data().iter().map(|&v| f(v)).collect())
                .expect("same shape")
        };
        self.flops += value.numel() as u64;
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.shift(neg, T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    // ---------------------------------------------------------------- structure

    /// Cross-correlation with zero padding. `kernel` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let [b, c_in, h, w] = nchw(self.dims(input), "conv2d input")?;
        let kd = self.dims(kernel).to_vec();
        let [c_out, kc, kh, kw] = nchw(&kd, "conv2d kernel")?;
        if kc != c_in || kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", self.dims(input), &kd));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", self.dims(input), &kd));
        }
        if let Some(bv) = bias {
            if self.dims(bv) != [c_out] {
                return Err(Error::shape("conv2d bias", self.dims(bv), &[c_out]));
            }
        }
        let geom = ConvGeom {
            batch: b,
            c_in,
            c_out,
            height: h,
            width: w,
            k: kh,
            pad: padding,
            out_h: h + 2 * padding - kh + 1,
            out_w: w + 2 * padding - kw + 1,
        };
        let data = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|bv| self.nodes[bv.0].value.data()),
        );
        let out_px = (b * c_out * geom.out_h * geom.out_w) as u64;
        self.flops += 2 * (kh * kw * c_in) as u64 * out_px;
        if bias.is_some() {
            self.flops += out_px;
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new(vec![b, c_out, geom.out_h, geom.out_w], data)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let d0 = self.dims(*first).to_vec();
        if d0.len() < 2 {
            return Err(Error::shape("concat", &d0, &[0, 0]));
        }
        let inner: usize = d0[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != d0.len() || d[0] != d0[0] || d[2..] != d0[2..] {
                return Err(Error::shape("concat", &d0, d));
            }
            channels += d[1];
        }
        let batch = d0[0];
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.dims()[1] * inner;
                data.extend_from_slice(&v.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut dims = d0.clone();
        dims[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(dims, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(input).to_vec();
        if d.len() < 2 || start + len > d[1] || len == 0 {
            return Err(Error::shape("narrow", &d, &[start, len]));
        }
        let inner: usize = d[2..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(d[0] * len * inner);
        for b in 0..d[0] {
            let base = (b * d[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = d;
        dims[1] = len;
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(dims, data)?, Op::Narrow { input, start }, rg))
    }

    /// Split axis 1 into `n` equal chunks.
    pub fn split(&mut self, input: Var, n: usize) -> Result<Vec<Var>> {
        let c = self.dims(input).get(1).copied().unwrap_or(0);
        if n == 0 || c % n != 0 {
            return Err(Error::shape("split", self.dims(input), &[n]));
        }
        let len = c / n;
        (0..n).map(|i| self.narrow(input, i * len, len)).collect()
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims.to_vec())?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    // ---------------------------------------------------------------- reductions

    /// Global pooling. Max routes its subgradient to the first maximal element.
    pub fn pool(&mut self, input: Var, kind: PoolKind, axis: PoolAxis) -> Result<Var> {
        let [b, c, h, w] = nchw(self.dims(input), "pool")?;
        let hw = h * w;
        let (outer_dims, reduce_len) = match axis {
            PoolAxis::Spatial => (vec![b, c, 1, 1], hw),
            PoolAxis::Channel => (vec![b, 1, h, w], c),
        };
        if reduce_len == 0 {
            return Err(Error::Invalid("pool over an empty axis".into()));
        }
        let x = self.value(input).data();
        let n_out: usize = outer_dims.iter().product();
        let mut data = Vec::with_capacity(n_out);
        let mut argmax = Vec::new();
        // element (o, r) of the reduction lives at index(o, r)
        let index = |o: usize, r: usize| match axis {
            PoolAxis::Spatial => o * hw + r,
            PoolAxis::Channel => (o / hw) * c * hw + r * hw + o % hw,
        };
        let inv = T::one() / T::from_usize(reduce_len).expect("small count");
        for o in 0..n_out {
            match kind {
                PoolKind::Avg => {
                    let s: T = (0..reduce_len).map(|r| x[index(o, r)]).sum();
                    data.push(s * inv);
                }
                PoolKind::Max => {
                    let mut best = index(o, 0);
                    for r in 1..reduce_len {
                        let i = index(o, r);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    data.push(x[best]);
                }
            }
        }
        self.flops += (b * c * hw) as u64;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(outer_dims, data)?,
            Op::Pool {
                input,
                kind,
                axis,
                argmax,
            },
            rg,
        ))
    }

    /// `input · weightᵀ + bias` for `input: [B, C]`, `weight: [Cout, C]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xd, wd, bd) = (self.dims(input), self.dims(weight), self.dims(bias));
        let (&[b, c], &[c_out, wc]) = (xd, wd) else {
            return Err(Error::shape("affine", xd, wd));
        };
        if wc != c || bd != [c_out] {
            return Err(Error::shape("affine", xd, wd));
        }
        let mut out = Vec::with_capacity(b * c_out);
        for _ in 0..b {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            b,
            c,
            c_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        self.flops += (2 * b * c * c_out + b * c_out) as u64;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![b, c_out], out)?,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Channel-wise product of `x: [B,C,H,W]` with `scale` holding `B·C` values
    /// (`[B,C]` or `[B,C,1,1]`).
    pub fn channel_mul(&mut self, x: Var, scale: Var) -> Result<Var> {
        let [b, c, h, w] = nchw(self.dims(x), "channel_mul")?;
        let sd = self.dims(scale);
        if sd.first() != Some(&b) || sd.get(1) != Some(&c) || sd.iter().product::<usize>() != b * c {
            return Err(Error::shape("channel_mul", self.dims(x), sd));
        }
        let hw = h * w;
        let (xv, sv) = (self.value(x).data(), self.value(scale).data());
        let data = (0..b * c * hw).map(|i| xv[i] * sv[i / hw]).collect();
        self.flops += (b * c * hw) as u64;
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], data)?,
            Op::ChannelMul { x, scale },
            rg,
        ))
    }

    /// Pixel-wise product of `x: [B,C,H,W]` with a `[B,1,H,W]` map.
    pub fn pixel_mul(&mut self, x: Var, map: Var) -> Result<Var> {
        let [b, c, h, w] = nchw(self.dims(x), "pixel_mul")?;
        if self.dims(map) != [b, 1, h, w] {
            return Err(Error::shape("pixel_mul", self.dims(x), self.dims(map)));
        }
        let hw = h * w;
        let (xv, mv) = (self.value(x).data(), self.value(map).data());
        let data = (0..b * c * hw)
            .map(|i| xv[i] * mv[(i / (c * hw)) * hw + i % hw])
            .collect();
        self.flops += (b * c * hw) as u64;
        let rg = self.rg(x) || self.rg(map);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], data)?,
            Op::PixelMul { x, map },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.flops += self.value(a).numel() as u64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).expect("count"))
    }

    /// `Σ_b w_b · Σ_i (pred − target)²` over the leading (batch) axis.
    pub fn sq_err(&mut self, pred: Var, target: Var, sample_weights: &[T]) -> Result<Var> {
        let (pd, td) = (self.dims(pred), self.dims(target));
        if pd != td || pd.first() != Some(&sample_weights.len()) {
            return Err(Error::shape("sq_err", pd, td));
        }
        let per = self.value(pred).numel() / sample_weights.len();
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: T = p
            .chunks(per)
            .zip(t.chunks(per))
            .zip(sample_weights)
            .map(|((pc, tc), &w)| {
                w * pc
                    .iter()
                    .zip(tc)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
            })
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SqErr {
                pred,
                target,
                sample_weights: sample_weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.dims(pred).to_vec();
        let b = *d.first().unwrap_or(&1);
        let n = self.value(pred).numel();
        let w = vec![T::one() / T::from_usize(n).expect("count"); b];
        self.sq_err(pred, target, &w)
    }

    // ---------------------------------------------------------------- backward

    /// Accumulate `d loss / d leaf` into every trainable leaf.
    ///
    /// Calling this twice on the same graph doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.dims().to_vec(), g)?),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.dims().to_vec()));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let reduce = |full: Vec<T>, len: usize| {
                    if len == 1 && full.len() != 1 {
                        vec![full.into_iter().sum()]
                    } else {
                        full
                    }
                };
                let at = |d: &[T], k: usize| if d.len() == 1 { d[0] } else { d[k] };
                if needs(*a) {
                    let ga = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().enumerate().map(|(k, &d)| d * at(bv, k)).collect(),
                    };
                    acc(*a, reduce(ga, av.len()));
                }
                if needs(*b) {
                    let gb = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&d| -d).collect(),
                        BinOp::Mul => g.iter().enumerate().map(|(k, &d)| d * at(av, k)).collect(),
                    };
                    acc(*b, reduce(gb, bv.len()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&d| d * *s).collect()),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = needs(*input).then(|| vec![T::zero(); val(*input).len()]);
                let mut gk = needs(*kernel).then(|| vec![T::zero(); val(*kernel).len()]);
                let mut gb = bias
                    .filter(|b| needs(*b))
                    .map(|_| vec![T::zero(); geom.c_out]);
                conv::backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, gk);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(*b, gb);
                }
            }
            Op::Concat(parts) => {
                let d = out.dims();
                let inner: usize = d[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.dims()[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(d[0] * c * inner);
                        for b in 0..d[0] {
                            let base = (b * d[1] + offset) * inner;
                            gp.extend_from_slice(&g[base..base + c * inner]);
                        }
                        acc(p, gp);
                    }
                    offset += c;
                }
            }
            Op::Narrow { input, start } => {
                let id = nodes[input.0].value.dims();
                let len = out.dims()[1];
                let inner: usize = id[2..].iter().product();
                let mut gi = vec![T::zero(); val(*input).len()];
                for b in 0..id[0] {
                    let dst = (b * id[1] + start) * inner;
                    let src = b * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, gi);
            }
            Op::Pool {
                input,
                kind,
                axis,
                argmax,
            } => {
                let id = nodes[input.0].value.dims();
                let (c, hw) = (id[1], id[2] * id[3]);
                let mut gi = vec![T::zero(); val(*input).len()];
                match kind {
                    PoolKind::Max => {
                        for (o, &idx) in argmax.iter().enumerate() {
                            gi[idx] = gi[idx] + g[o];
                        }
                    }
                    PoolKind::Avg => {
                        for (k, gk) in gi.iter_mut().enumerate() {
                            *gk = match axis {
                                PoolAxis::Spatial => {
                                    g[k / hw] / T::from_usize(hw).expect("count")
                                }
                                PoolAxis::Channel => {
                                    g[(k / (c * hw)) * hw + k % hw]
                                        / T::from_usize(c).expect("count")
                                }
                            };
                        }
                    }
                }
                acc(*input, gi);
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (b, c) = (nodes[input.0].value.dims()[0], nodes[input.0].value.dims()[1]);
                let c_out = out.dims()[1];
                if needs(*input) {
                    let mut gi = vec![T::zero(); b * c];
                    T::gemm(b, c_out, c, g, false, val(*weight), false, T::zero(), &mut gi);
                    acc(*input, gi);
                }
                if needs(*weight) {
                    let mut gw = vec![T::zero(); c_out * c];
                    T::gemm(c_out, b, c, g, true, val(*input), false, T::zero(), &mut gw);
                    acc(*weight, gw);
                }
                if needs(*bias) {
                    let mut gb = vec![T::zero(); c_out];
                    for row in g.chunks(c_out) {
                        for (a, &d) in gb.iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::ChannelMul { x, scale } => {
                let d = out.dims();
                let hw = d[2] * d[3];
                let (xv, sv) = (val(*x), val(*scale));
                if needs(*x) {
                    acc(*x, g.iter().enumerate().map(|(k, &d)| d * sv[k / hw]).collect());
                }
                if needs(*scale) {
                    let mut gs = vec![T::zero(); sv.len()];
                    for (k, &d) in g.iter().enumerate() {
                        gs[k / hw] = gs[k / hw] + d * xv[k];
                    }
                    acc(*scale, gs);
                }
            }
            Op::PixelMul { x, map } => {
                let d = out.dims();
                let (c, hw) = (d[1], d[2] * d[3]);
                let (xv, mv) = (val(*x), val(*map));
                let mi = |k: usize| (k / (c * hw)) * hw + k % hw;
                if needs(*x) {
                    acc(*x, g.iter().enumerate().map(|(k, &d)| d * mv[mi(k)]).collect());
                }
                if needs(*map) {
                    let mut gm = vec![T::zero(); mv.len()];
                    for (k, &d) in g.iter().enumerate() {
                        gm[mi(k)] = gm[mi(k)] + d * xv[k];
                    }
                    acc(*map, gm);
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::SqErr {
                pred,
                target,
                sample_weights,
            } => {
                let (p, t) = (val(*pred), val(*target));
                let per = p.len() / sample_weights.len();
                let two = T::one() + T::one();
                let gp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(k, (&a, &b))| two * sample_weights[k / per] * (a - b) * g[0])
                    .collect();
                if needs(*target) {
                    acc(*target, gp.iter().map(|&d| -d).collect());
                }
                acc(*pred, gp);
            }
        }
    }
}
