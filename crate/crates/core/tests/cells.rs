mod common;

use common::*;
use stpredict::cells::{ConvLstmCell, LayerState, SpatioTemporalAttention, TemporalAttention};
use stpredict::params::ParamStore;
use stpredict::{Graph, Tensor};

#[test]
fn cells_match_scalar_loops() {
    let mut r = rng(11);
    for kind in 0..CASE_KINDS {
        for _ in 0..8 {
            let s = Shape::random(&mut r);
            let (case, store) = build_case(kind, &s, &mut r);
            let xs = case.random_inputs(&s, &mut r);
            let exact = case
                .run::<f64>(&store, &xs)
                .iter()
                .zip(case.oracle(&store, &xs))
                .map(|(g, w)| w.max_abs_diff(g))
                .fold(0.0, f64::max);
            assert!(exact < 1e-12, "{}: f64 gap {exact}", case.name());
            let gap = case.oracle_gap(&store, &xs);
            assert!(gap < 1e-5, "{}: f32 gap {gap}", case.name());
        }
    }
}

#[test]
fn cell_gradients_match_finite_differences() {
    let mut r = rng(12);
    for kind in 0..CASE_KINDS {
        let s = Shape::tiny();
        let (case, store) = build_case(kind, &s, &mut r);
        let xs = case.random_inputs(&s, &mut r);
        let err = case.grad_check(&store, &xs, 1e-6);
        assert!(err < 1e-4, "{}: rel err {err}", case.name());
    }
}

#[test]
fn forget_bias_starts_at_one() {
    let mut store = ParamStore::<f64>::new();
    let cell = ConvLstmCell::new(&mut store, "c", 2, 3, 3, &mut rng(0)).unwrap();
    let b = store.get(cell.gates.bias).data().to_vec();
    assert_eq!(&b[3..6], &[1.0; 3]);
    assert!(b[..3].iter().chain(&b[6..]).all(|&v| v == 0.0));
}

#[test]
fn zero_state_convlstm_with_zero_weights_halves_nothing() {
    // all-zero weights: i = f = o = 1/2, g = 0, so c' = c/2 and h' = tanh(c')/2
    let mut store = ParamStore::<f64>::new();
    let cell = ConvLstmCell::new(&mut store, "c", 1, 1, 3, &mut rng(0)).unwrap();
    zero_params(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::full(vec![1, 1, 2, 2], 5.0));
    let h = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let c = g.constant(Tensor::full(vec![1, 1, 2, 2], 0.8));
    let s = cell.forward(&mut g, &p, x, LayerState { h, c }).unwrap();
    for &v in g.value(s.c).data() {
        assert!((v - 0.4).abs() < 1e-15);
    }
    for &v in g.value(s.h).data() {
        assert!((v - 0.4f64.tanh() / 2.0).abs() < 1e-15);
    }
}

#[test]
fn temporal_attention_weights_are_bounded_and_channelwise() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let ta = TemporalAttention::new(&mut store, "t", 5, 3, &mut r).unwrap();
    randomize(&mut store, &mut r, 3.0);
    let x = random_map(&mut r, 2, 5, 4, 4);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.to_tensor());
    let (out, e) = ta.forward_with_weights(&mut g, &p, xv).unwrap();
    assert_eq!(g.dims(e), &[2, 5]);
    assert!(g.value(e).data().iter().all(|v| v.abs() < 1.0));
    // out / U is constant across the plane of each channel
    let u = P(&store).conv("t.wu", &x);
    let o = Map::from_tensor(g.value(out));
    for b in 0..2 {
        for c in 0..5 {
            let ev = g.value(e).data()[b * 5 + c];
            for y in 0..4 {
                for xx in 0..4 {
                    assert!((o.at(b, c, y, xx) - ev * u.at(b, c, y, xx)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn spatiotemporal_attention_maps_are_gates() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let sta = SpatioTemporalAttention::new(&mut store, "s", 16, &mut r).unwrap();
    assert_eq!(SpatioTemporalAttention::hidden_width(16), 2);
    randomize(&mut store, &mut r, 1.0);
    let x = random_map(&mut r, 1, 16, 5, 5);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.to_tensor());
    let (out, mc, ms) = sta.forward_with_maps(&mut g, &p, xv).unwrap();
    assert_eq!(g.dims(mc), &[1, 16]);
    assert_eq!(g.dims(ms), &[1, 1, 5, 5]);
    for &v in g.value(mc).data().iter().chain(g.value(ms).data()) {
        assert!(v > 0.0 && v < 1.0);
    }
    // gating never amplifies
    for (o, i) in g.value(out).data().iter().zip(&x.v) {
        assert!(o.abs() <= i.abs());
    }
}

#[test]
fn cell_flop_counts_match_the_graph() {
    let mut r = rng(5);
    let s = Shape { b: 2, c_in: 3, hidden: 4, memory: 4, h: 4, w: 6, k: 3 };
    for kind in 0..CASE_KINDS {
        let (case, store) = build_case(kind, &s, &mut r);
        let xs = case.random_inputs(&s, &mut r);
        let store32 = store.cast::<f32>();
        let mut g = Graph::<f32>::new();
        let p = store32.bind(&mut g);
        let vars: Vec<_> = xs.iter().map(|m| g.constant(m.to_tensor().cast())).collect();
        let before = g.flops();
        let counted = match &case {
            AnyCase::ConvLstm(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::Causal(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::St(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::Ta(c) => {
                c.0.forward(&mut g, &p, vars[0]).unwrap();
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::Sta(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::Ghu(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
            AnyCase::Context(c) => {
                c.forward(&mut g, &p, &vars);
                c.0.flops(s.b, s.h, s.w)
            }
        };
        assert_eq!(g.flops() - before, counted, "{}", case.name());
    }
}
