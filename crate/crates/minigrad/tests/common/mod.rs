//! Shared helpers for the oracle tests. The numeric routines here are
//! written as plain scalar loops on purpose: they are the independent
//! reference the engine is checked against.
#![allow(dead_code)] // each test binary uses a different subset

use minigrad::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// j-loop-innermost-on-k matmul, deliberately a different loop order than
/// the engine uses.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Row-wise softmax without max subtraction (fine for oracle-scale inputs).
pub fn naive_softmax(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..d {
            out[r * d + c] = row[c].exp() / sum;
        }
    }
    out
}

/// Single-head attention oracle: explicit logits, softmax, weighted sum.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_kv: usize,
    dk: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; n_q * n_kv];
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..n_q {
        for j in 0..n_kv {
            let mut dot = 0.0;
            for c in 0..dk {
                dot += q[i * dk + c] * k[j * dk + c];
            }
            logits[i * n_kv + j] = dot * scale;
        }
    }
    let weights = naive_softmax(&logits, n_q, n_kv);
    let mut out = vec![0.0; n_q * dv];
    for i in 0..n_q {
        for j in 0..n_kv {
            for c in 0..dv {
                out[i * dv + c] += weights[i * n_kv + j] * v[j * dv + c];
            }
        }
    }
    (out, weights)
}
