//! Network building blocks composed from graph primitives: affine layers,
//! scaled dot-product attention, the fusion transformer layer, and a GRU cell.

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// `x . w + b` for `x: [n x din]`, `w: [din x dout]`, `b: [dout]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

/// Single-head attention: `softmax(q . k^T / sqrt(dk)) . v`.
/// Returns `(output, weights)`; the weight rows each sum to one.
pub fn scaled_dot_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> (Var, Var) {
    let dk = g.val(k).dims2().1;
    assert_eq!(g.val(q).dims2().1, dk, "q/k feature dims differ");
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let scaled = g.scale(logits, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scaled);
    (g.matmul(weights, v), weights)
}

/// Per-layer parameters. Query/key/value maps are bias-free projections;
/// heads are column blocks of the shared `[d x d]` matrices.
#[derive(Clone, Copy)]
pub struct TransformerLayerParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// One fusion layer: multi-head attention, head concat + output projection,
/// a two-layer MLP, and a single residual around the whole block. With all
/// parameters zero the layer is the identity.
///
/// Returns the output and the per-head attention weight matrices.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    f_in: Var,
    p: &TransformerLayerParams,
    heads: usize,
) -> (Var, Vec<Var>) {
    let (_, d) = g.val(f_in).dims2();
    assert!(heads > 0 && d % heads == 0, "feature dim {} not divisible by {} heads", d, heads);
    let dh = d / heads;

    let q = g.matmul(f_in, p.wq);
    let k = g.matmul(f_in, p.wk);
    let v = g.matmul(f_in, p.wv);

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let (oh, wh) = scaled_dot_attention(g, qh, kh, vh);
        outs.push(oh);
        weights.push(wh);
    }
    let cat = g.concat_cols(&outs);
    let a = g.matmul(cat, p.wo);

    let h1 = linear(g, a, p.mlp_w1, p.mlp_b1);
    let h1 = g.relu(h1);
    let m = linear(g, h1, p.mlp_w2, p.mlp_b2);

    (g.add(m, f_in), weights)
}

#[derive(Clone, Copy)]
pub struct GruParams {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

/// GRU cell: `h' = (1 - z) * n + z * h` with
/// `z = sig(xWz + hUz + bz)`, `r = sig(xWr + hUr + br)`,
/// `n = tanh(xWn + (r * h)Un + bn)`.
pub fn gru_step<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, p: &GruParams) -> Var {
    let z = gate(g, x, h, p.wz, p.uz, p.bz);
    let z = g.sigmoid(z);
    let r = gate(g, x, h, p.wr, p.ur, p.br);
    let r = g.sigmoid(r);

    let rh = g.mul(r, h);
    let n = gate(g, x, rh, p.wn, p.un, p.bn);
    let n = g.tanh(n);

    let one_minus_z = g.affine(z, -1.0, 1.0);
    let a = g.mul(one_minus_z, n);
    let b = g.mul(z, h);
    g.add(a, b)
}

fn gate<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, w: Var, u: Var, b: Var) -> Var {
    let xs = g.matmul(x, w);
    let hs = g.matmul(h, u);
    let s = g.add(xs, hs);
    g.add_bias(s, b)
}
