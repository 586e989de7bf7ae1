//! Property tests for structural invariants of the graph engine.

mod common;

use common::*;
use minigrad::{transformer_layer, Graph, Tensor, TransformerLayerParams};
use proptest::prelude::*;

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| tensor_strategy(r, c))) {
        let rows = t.shape[0];
        let cols = t.shape[1];
        let mut g = Graph::<f64>::new();
        let x = g.input(t);
        let s = g.softmax(x);
        let out = g.val(s);
        for i in 0..rows {
            let sum: f64 = out.data[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, sum);
            for j in 0..cols {
                prop_assert!(out.data[i * cols + j] > 0.0);
            }
        }
    }

    #[test]
    fn transformer_layer_preserves_shape(
        seed in 0u64..1000,
        n in 1usize..7,
        heads in 1usize..4,
    ) {
        let mut r = rng(seed);
        let d = heads * 2;
        let f_in = rand_tensor(&mut r, &[n, d], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let fv = g.input(f_in);
        let p = TransformerLayerParams {
            wq: { let t = rand_tensor(&mut r, &[d, d], -0.5, 0.5); g.input(t) },
            wk: { let t = rand_tensor(&mut r, &[d, d], -0.5, 0.5); g.input(t) },
            wv: { let t = rand_tensor(&mut r, &[d, d], -0.5, 0.5); g.input(t) },
            wo: { let t = rand_tensor(&mut r, &[d, d], -0.5, 0.5); g.input(t) },
            mlp_w1: { let t = rand_tensor(&mut r, &[d, 4 * d], -0.5, 0.5); g.input(t) },
            mlp_b1: { let t = rand_tensor(&mut r, &[4 * d], -0.5, 0.5); g.input(t) },
            mlp_w2: { let t = rand_tensor(&mut r, &[4 * d, d], -0.5, 0.5); g.input(t) },
            mlp_b2: { let t = rand_tensor(&mut r, &[d], -0.5, 0.5); g.input(t) },
        };
        let (out, attn) = transformer_layer(&mut g, fv, &p, heads);
        prop_assert_eq!(g.val(out).shape.clone(), vec![n, d]);
        prop_assert_eq!(attn.len(), heads);
        for a in attn {
            prop_assert_eq!(g.val(a).shape.clone(), vec![n, n]);
        }
    }

    #[test]
    fn fanout_gradient_is_exactly_twice(seed in 0u64..1000) {
        // d(f+f)/dx must be bitwise 2*df/dx: accumulation is plain addition.
        let mut r = rng(seed);
        let t = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);

        let mut g1 = Graph::<f64>::new();
        let x1 = g1.param(t.clone());
        let f1 = g1.tanh(x1);
        let s1 = g1.sum_all(f1);
        g1.backward(s1);
        let single = g1.grad(x1).unwrap().to_vec();

        let mut g2 = Graph::<f64>::new();
        let x2 = g2.param(t);
        let f2 = g2.tanh(x2);
        let doubled = g2.add(f2, f2);
        let s2 = g2.sum_all(doubled);
        g2.backward(s2);
        let fanout = g2.grad(x2).unwrap().to_vec();

        for (a, b) in single.iter().zip(fanout.iter()) {
            prop_assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic(seed in 0u64..1000) {
        let run = |seed: u64| -> (Vec<u64>, Vec<u64>) {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
            let w = rand_tensor(&mut r, &[5, 4], -1.0, 1.0);
            let mut g = Graph::<f64>::new();
            let xv = g.param(x);
            let wv = g.param(w);
            let y = g.matmul(xv, wv);
            let a = g.softmax(y);
            let t = g.tanh(a);
            let s = g.sum_all(t);
            g.backward(s);
            (
                g.val(t).data.iter().map(|v| v.to_bits()).collect(),
                g.grad(xv).unwrap().iter().map(|v| v.to_bits()).collect(),
            )
        };
        let (v1, g1) = run(seed);
        let (v2, g2) = run(seed);
        prop_assert_eq!(v1, v2);
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn avg_pool_preserves_mean(
        seed in 0u64..1000,
        h in 1usize..4,
        w in 1usize..4,
        c in 1usize..3,
    ) {
        let mut r = rng(seed);
        let t = rand_tensor(&mut r, &[h * 2, w * 3, c], -2.0, 2.0);
        let before: f64 = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let mut g = Graph::<f64>::new();
        let x = g.input(t);
        let p = g.avg_pool2d(x, 2, 3);
        let out = g.val(p);
        let after: f64 = out.data.iter().sum::<f64>() / out.data.len() as f64;
        prop_assert!((before - after).abs() < 1e-12);
    }
}
