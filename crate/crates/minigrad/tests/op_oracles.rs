//! Forward-path checks of the graph ops against independent scalar oracles.

mod common;

use common::*;
use minigrad::{
    gru_step, linear, scaled_dot_attention, transformer_layer, Graph, GruParams, Tensor,
    TransformerLayerParams,
};
use rand::Rng;

#[test]
fn linear_matches_triple_loop_oracle() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let w = rand_tensor(&mut r, &[4, 2], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[2], -1.0, 1.0);

    let mut expected = naive_matmul(&x.data, &w.data, 3, 4, 2);
    for row in 0..3 {
        for c in 0..2 {
            expected[row * 2 + c] += b.data[c];
        }
    }

    let mut g: Graph<f64> = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = linear(&mut g, xv, wv, bv);
    assert_eq!(g.val(y).shape, vec![3, 2]);
    assert!(max_abs_diff(&g.val(y).data, &expected) < 1e-12);
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut r = rng(11);
    let q = rand_tensor(&mut r, &[3, 4], -1.5, 1.5);
    let k = rand_tensor(&mut r, &[3, 4], -1.5, 1.5);
    let v = rand_tensor(&mut r, &[3, 4], -1.5, 1.5);
    let (want_out, want_w) = naive_attention(&q.data, &k.data, &v.data, 3, 3, 4, 4);

    let mut g: Graph<f64> = Graph::new();
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    let (out, w) = scaled_dot_attention(&mut g, qv, kv, vv);
    assert!(max_abs_diff(&g.val(out).data, &want_out) < 1e-12);
    assert!(max_abs_diff(&g.val(w).data, &want_w) < 1e-12);
    for row in 0..3 {
        let sum: f64 = g.val(w).data[row * 3..(row + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_oracle_sweep_100_seeds() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let n = r.gen_range(1..=6);
        let dk = r.gen_range(1..=6);
        let dv = r.gen_range(1..=6);
        let q = rand_tensor(&mut r, &[n, dk], -2.0, 2.0);
        let k = rand_tensor(&mut r, &[n, dk], -2.0, 2.0);
        let v = rand_tensor(&mut r, &[n, dv], -2.0, 2.0);
        let (want_out, want_w) = naive_attention(&q.data, &k.data, &v.data, n, n, dk, dv);

        let mut g: Graph<f64> = Graph::new();
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
        let (out, w) = scaled_dot_attention(&mut g, qv, kv, vv);
        assert!(
            max_abs_diff(&g.val(out).data, &want_out) < 1e-10,
            "attention output diverged from oracle at seed {}",
            seed
        );
        assert!(max_abs_diff(&g.val(w).data, &want_w) < 1e-10);
    }
}

// ── Transformer layer ──

struct LayerTensors {
    wq: Tensor<f64>,
    wk: Tensor<f64>,
    wv: Tensor<f64>,
    wo: Tensor<f64>,
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
}

fn random_layer(r: &mut rand_chacha::ChaCha8Rng, d: usize, hid: usize) -> LayerTensors {
    LayerTensors {
        wq: rand_tensor(r, &[d, d], -0.5, 0.5),
        wk: rand_tensor(r, &[d, d], -0.5, 0.5),
        wv: rand_tensor(r, &[d, d], -0.5, 0.5),
        wo: rand_tensor(r, &[d, d], -0.5, 0.5),
        w1: rand_tensor(r, &[d, hid], -0.5, 0.5),
        b1: rand_tensor(r, &[hid], -0.5, 0.5),
        w2: rand_tensor(r, &[hid, d], -0.5, 0.5),
        b2: rand_tensor(r, &[d], -0.5, 0.5),
    }
}

fn build_layer(g: &mut Graph<f64>, t: &LayerTensors) -> TransformerLayerParams {
    TransformerLayerParams {
        wq: g.input(t.wq.clone()),
        wk: g.input(t.wk.clone()),
        wv: g.input(t.wv.clone()),
        wo: g.input(t.wo.clone()),
        mlp_w1: g.input(t.w1.clone()),
        mlp_b1: g.input(t.b1.clone()),
        mlp_w2: g.input(t.w2.clone()),
        mlp_b2: g.input(t.b2.clone()),
    }
}

/// Scalar reimplementation of the fusion layer, heads handled by explicit
/// column arithmetic.
fn naive_transformer(f_in: &Tensor<f64>, t: &LayerTensors, heads: usize) -> Vec<f64> {
    let (n, d) = f_in.dims2();
    let hid = t.b1.numel();
    let dh = d / heads;
    let q = naive_matmul(&f_in.data, &t.wq.data, n, d, d);
    let k = naive_matmul(&f_in.data, &t.wk.data, n, d, d);
    let v = naive_matmul(&f_in.data, &t.wv.data, n, d, d);

    let take_cols = |m: &[f64], start: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * dh);
        for row in 0..n {
            out.extend_from_slice(&m[row * d + start..row * d + start + dh]);
        }
        out
    };

    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        let (qh, kh, vh) = (take_cols(&q, h * dh), take_cols(&k, h * dh), take_cols(&v, h * dh));
        let (oh, _) = naive_attention(&qh, &kh, &vh, n, n, dh, dh);
        for row in 0..n {
            for c in 0..dh {
                cat[row * d + h * dh + c] = oh[row * dh + c];
            }
        }
    }
    let proj = naive_matmul(&cat, &t.wo.data, n, d, d);
    let mut h1 = naive_matmul(&proj, &t.w1.data, n, d, hid);
    for row in 0..n {
        for c in 0..hid {
            h1[row * hid + c] = (h1[row * hid + c] + t.b1.data[c]).max(0.0);
        }
    }
    let mut out = naive_matmul(&h1, &t.w2.data, n, hid, d);
    for row in 0..n {
        for c in 0..d {
            out[row * d + c] += t.b2.data[c] + f_in.data[row * d + c];
        }
    }
    out
}

#[test]
fn transformer_layer_matches_scalar_oracle() {
    for &heads in &[1usize, 2, 3] {
        let mut r = rng(3 + heads as u64);
        let d = 6;
        let f_in = rand_tensor(&mut r, &[5, d], -1.0, 1.0);
        let t = random_layer(&mut r, d, 12);
        let want = naive_transformer(&f_in, &t, heads);

        let mut g: Graph<f64> = Graph::new();
        let fv = g.input(f_in.clone());
        let p = build_layer(&mut g, &t);
        let (out, weights) = transformer_layer(&mut g, fv, &p, heads);
        assert_eq!(weights.len(), heads);
        assert!(
            max_abs_diff(&g.val(out).data, &want) < 1e-10,
            "transformer output diverged from oracle with {} heads",
            heads
        );
    }
}

#[test]
fn transformer_layer_zero_params_is_identity() {
    let mut r = rng(21);
    let d = 8;
    let f_in = rand_tensor(&mut r, &[10, d], -2.0, 2.0);
    let mut g: Graph<f64> = Graph::new();
    let fv = g.input(f_in.clone());
    let zero = |g: &mut Graph<f64>, shape: &[usize]| g.input(Tensor::zeros(shape.to_vec()));
    let p = TransformerLayerParams {
        wq: zero(&mut g, &[d, d]),
        wk: zero(&mut g, &[d, d]),
        wv: zero(&mut g, &[d, d]),
        wo: zero(&mut g, &[d, d]),
        mlp_w1: zero(&mut g, &[d, 16]),
        mlp_b1: zero(&mut g, &[16]),
        mlp_w2: zero(&mut g, &[16, d]),
        mlp_b2: zero(&mut g, &[d]),
    };
    let (out, _) = transformer_layer(&mut g, fv, &p, 4);
    assert_eq!(g.val(out).data, f_in.data, "zero-parameter layer must pass input through untouched");
}

#[test]
fn transformer_layer_shape_at_full_scale_geometry() {
    // 22x5 image tokens + 8x8 grid tokens = 174-token sequence.
    let (img_tokens, grid_tokens) = (22 * 5, 8 * 8);
    let n = img_tokens + grid_tokens;
    assert_eq!(n, 174);

    let d = 64;
    let mut r = rng(40);
    let f_in = rand_tensor(&mut r, &[n, d], -1.0, 1.0);
    let t = random_layer(&mut r, d, 4 * d);
    let mut g: Graph<f64> = Graph::new();
    let fv = g.input(f_in);
    let p = build_layer(&mut g, &t);
    let (out, weights) = transformer_layer(&mut g, fv, &p, 4);
    assert_eq!(g.val(out).shape, vec![n, d]);
    for w in weights {
        assert_eq!(g.val(w).shape, vec![n, n]);
    }
}

// ── Convolution ──

/// Direct six-loop convolution with zero padding, HWC layout.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (h, wid, cin) = x.dims3();
    let (kh, kw, _, cout) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![ho, wo, cout]);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= wid as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data[((sy as usize) * wid + sx as usize) * cin + ci];
                            let wv = w.data[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out.data[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[5, 7, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 3, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4], -1.0, 1.0);
    let want = naive_conv(&x, &w, &b, 1, 1);

    let mut g: Graph<f64> = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, bv, 1, 1);
    assert_eq!(g.val(y).shape, want.shape);
    assert!(max_abs_diff(&g.val(y).data, &want.data) < 1e-12);
}

#[test]
fn conv2d_strided_unpadded_matches_oracle() {
    let mut r = rng(15);
    let x = rand_tensor(&mut r, &[6, 8, 2], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 2, 2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    let want = naive_conv(&x, &w, &b, 2, 0);

    let mut g: Graph<f64> = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let y = g.conv2d(xv, wv, bv, 2, 0);
    assert_eq!(g.val(y).shape, vec![3, 4, 3]);
    assert!(max_abs_diff(&g.val(y).data, &want.data) < 1e-12);
}

// ── GRU ──

struct GruTensors {
    wz: Tensor<f64>,
    uz: Tensor<f64>,
    bz: Tensor<f64>,
    wr: Tensor<f64>,
    ur: Tensor<f64>,
    br: Tensor<f64>,
    wn: Tensor<f64>,
    un: Tensor<f64>,
    bn: Tensor<f64>,
}

fn random_gru(r: &mut rand_chacha::ChaCha8Rng, din: usize, dh: usize) -> GruTensors {
    GruTensors {
        wz: rand_tensor(r, &[din, dh], -1.0, 1.0),
        uz: rand_tensor(r, &[dh, dh], -1.0, 1.0),
        bz: rand_tensor(r, &[dh], -1.0, 1.0),
        wr: rand_tensor(r, &[din, dh], -1.0, 1.0),
        ur: rand_tensor(r, &[dh, dh], -1.0, 1.0),
        br: rand_tensor(r, &[dh], -1.0, 1.0),
        wn: rand_tensor(r, &[din, dh], -1.0, 1.0),
        un: rand_tensor(r, &[dh, dh], -1.0, 1.0),
        bn: rand_tensor(r, &[dh], -1.0, 1.0),
    }
}

fn naive_gru(x: &Tensor<f64>, h: &Tensor<f64>, t: &GruTensors) -> Vec<f64> {
    let (bsz, din) = x.dims2();
    let dh = h.dims2().1;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let pre = |w: &Tensor<f64>, u: &Tensor<f64>, b: &Tensor<f64>, xrow: &[f64], hrow: &[f64], c: usize| {
        let mut acc = b.data[c];
        for i in 0..din {
            acc += xrow[i] * w.data[i * dh + c];
        }
        for i in 0..dh {
            acc += hrow[i] * u.data[i * dh + c];
        }
        acc
    };
    let mut out = vec![0.0; bsz * dh];
    for row in 0..bsz {
        let xrow = &x.data[row * din..(row + 1) * din];
        let hrow = &h.data[row * dh..(row + 1) * dh];
        let z: Vec<f64> = (0..dh).map(|c| sig(pre(&t.wz, &t.uz, &t.bz, xrow, hrow, c))).collect();
        let r: Vec<f64> = (0..dh).map(|c| sig(pre(&t.wr, &t.ur, &t.br, xrow, hrow, c))).collect();
        let rh: Vec<f64> = (0..dh).map(|c| r[c] * hrow[c]).collect();
        for c in 0..dh {
            let n = pre(&t.wn, &t.un, &t.bn, xrow, &rh, c).tanh();
            out[row * dh + c] = (1.0 - z[c]) * n + z[c] * hrow[c];
        }
    }
    out
}

fn build_gru(g: &mut Graph<f64>, t: &GruTensors) -> GruParams {
    GruParams {
        wz: g.input(t.wz.clone()),
        uz: g.input(t.uz.clone()),
        bz: g.input(t.bz.clone()),
        wr: g.input(t.wr.clone()),
        ur: g.input(t.ur.clone()),
        br: g.input(t.br.clone()),
        wn: g.input(t.wn.clone()),
        un: g.input(t.un.clone()),
        bn: g.input(t.bn.clone()),
    }
}

#[test]
fn gru_step_matches_scalar_oracle() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let h = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    let t = random_gru(&mut r, 3, 4);
    let want = naive_gru(&x, &h, &t);

    let mut g: Graph<f64> = Graph::new();
    let (xv, hv) = (g.input(x), g.input(h));
    let p = build_gru(&mut g, &t);
    let out = gru_step(&mut g, xv, hv, &p);
    assert!(max_abs_diff(&g.val(out).data, &want) < 1e-12);
}

#[test]
fn gru_forced_gates_pin_convention() {
    let mut r = rng(19);
    let x = rand_tensor(&mut r, &[1, 3], -1.0, 1.0);
    let h = rand_tensor(&mut r, &[1, 4], -1.0, 1.0);
    let mut t = random_gru(&mut r, 3, 4);

    // z forced to 1: the cell must keep its previous state.
    t.bz = Tensor::full(vec![4], 40.0);
    let mut g: Graph<f64> = Graph::new();
    let (xv, hv) = (g.input(x.clone()), g.input(h.clone()));
    let p = build_gru(&mut g, &t);
    let out = gru_step(&mut g, xv, hv, &p);
    assert!(max_abs_diff(&g.val(out).data, &h.data) < 1e-9);

    // z forced to 0, r forced to 0: the cell becomes tanh(x Wn + bn).
    t.bz = Tensor::full(vec![4], -40.0);
    t.br = Tensor::full(vec![4], -40.0);
    let mut want = vec![0.0; 4];
    for c in 0..4 {
        let mut acc = t.bn.data[c];
        for i in 0..3 {
            acc += x.data[i] * t.wn.data[i * 4 + c];
        }
        want[c] = acc.tanh();
    }
    let mut g: Graph<f64> = Graph::new();
    let (xv, hv) = (g.input(x), g.input(h));
    let p = build_gru(&mut g, &t);
    let out = gru_step(&mut g, xv, hv, &p);
    assert!(max_abs_diff(&g.val(out).data, &want) < 1e-9);
}

// ── Pooling, upsampling, normalization, reductions ──

#[test]
fn avg_pool_matches_window_means() {
    let mut r = rng(31);
    let x = rand_tensor(&mut r, &[4, 6, 2], -1.0, 1.0);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x.clone());
    let y = g.avg_pool2d(xv, 2, 3);
    assert_eq!(g.val(y).shape, vec![2, 2, 2]);
    for oy in 0..2 {
        for ox in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..3 {
                        acc += x.data[(((oy * 2 + dy) * 6) + ox * 3 + dx) * 2 + c];
                    }
                }
                let want = acc / 6.0;
                let got = g.val(y).data[(oy * 2 + ox) * 2 + c];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bilinear_upsample_of_constant_map_is_constant() {
    let x = Tensor::full(vec![3, 5, 2], 0.7);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x);
    let y = g.bilinear_up(xv, 2);
    assert_eq!(g.val(y).shape, vec![6, 10, 2]);
    for &v in &g.val(y).data {
        assert!((v - 0.7).abs() < 1e-12);
    }
}

#[test]
fn bilinear_upsample_half_pixel_weights() {
    // 1-d strip [a, b] at factor 2 interpolates to [a, 3/4 a + 1/4 b, 1/4 a + 3/4 b, b].
    let (a, b) = (0.3, -1.1);
    let x = Tensor::new(vec![1, 2, 1], vec![a, b]);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x);
    let y = g.bilinear_up(xv, 2);
    let row = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b];
    // Height-1 axis clamps, so both output rows carry the same strip.
    let want: Vec<f64> = row.iter().chain(row.iter()).copied().collect();
    assert!(max_abs_diff(&g.val(y).data, &want) < 1e-15);
}

#[test]
fn layer_norm_matches_scalar_oracle() {
    let mut r = rng(23);
    let (n, d) = (3, 5);
    let x = rand_tensor(&mut r, &[n, d], -2.0, 2.0);
    let gamma = rand_tensor(&mut r, &[d], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[d], -0.5, 0.5);
    let eps = 1e-5;

    let mut want = vec![0.0; n * d];
    for row in 0..n {
        let slice = &x.data[row * d..(row + 1) * d];
        let mu: f64 = slice.iter().sum::<f64>() / d as f64;
        let var: f64 = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        for c in 0..d {
            want[row * d + c] = gamma.data[c] * (slice[c] - mu) / (var + eps).sqrt() + beta.data[c];
        }
    }

    let mut g: Graph<f64> = Graph::new();
    let (xv, gv, bv) = (g.input(x), g.input(gamma), g.input(beta));
    let y = g.layer_norm(xv, gv, bv, eps);
    assert!(max_abs_diff(&g.val(y).data, &want) < 1e-12);
}

#[test]
fn softmax_of_constant_rows_is_uniform() {
    let x = Tensor::full(vec![2, 4], 3.25);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x);
    let y = g.softmax(xv);
    for &v in &g.val(y).data {
        assert_eq!(v, 0.25);
    }
}

#[test]
fn nll_of_exact_one_hot_is_zero() {
    let probs = Tensor::new(vec![3, 4], {
        let mut d = vec![0.0; 12];
        d[2] = 1.0;
        d[4] = 1.0;
        d[11] = 1.0;
        d
    });
    let mut g: Graph<f64> = Graph::new();
    let pv = g.input(probs);
    let loss = g.nll_rows(pv, vec![2, 0, 3]);
    assert_eq!(g.val(loss).data[0], 0.0);
}

#[test]
fn concat_and_slice_round_trip() {
    let mut r = rng(41);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    let mut g: Graph<f64> = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let cat = g.concat_rows(&[av, bv]);
    let a2 = g.slice_rows(cat, 0, 3);
    let b2 = g.slice_rows(cat, 3, 2);
    assert_eq!(g.val(a2).data, a.data);
    assert_eq!(g.val(b2).data, b.data);

    let c = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let cv = g.input(c.clone());
    let wide = g.concat_cols(&[av, cv]);
    assert_eq!(g.val(wide).shape, vec![3, 6]);
    let c2 = g.slice_cols(wide, 4, 2);
    assert_eq!(g.val(c2).data, c.data);
}

#[test]
fn mean_rows_matches_column_means() {
    let mut r = rng(43);
    let x = rand_tensor(&mut r, &[5, 3], -2.0, 2.0);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x.clone());
    let m = g.mean_rows(xv);
    for c in 0..3 {
        let want: f64 = (0..5).map(|row| x.data[row * 3 + c]).sum::<f64>() / 5.0;
        assert!((g.val(m).data[c] - want).abs() < 1e-12);
    }
}

#[test]
fn elementwise_op_values() {
    let x = Tensor::new(vec![1, 4], vec![-2.0, -0.5, 0.5, 3.0]);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.input(x);

    let r = g.relu(xv);
    assert_eq!(g.val(r).data, vec![0.0, 0.0, 0.5, 3.0]);

    let a = g.abs(xv);
    assert_eq!(g.val(a).data, vec![2.0, 0.5, 0.5, 3.0]);

    let c = g.clamp(xv, -1.0, 1.0);
    assert_eq!(g.val(c).data, vec![-1.0, -0.5, 0.5, 1.0]);

    let f = g.affine(xv, 2.0, 1.0);
    assert_eq!(g.val(f).data, vec![-3.0, 0.0, 2.0, 7.0]);

    let s = g.sum_all(xv);
    assert_eq!(g.val(s).data[0], 1.0);
}
