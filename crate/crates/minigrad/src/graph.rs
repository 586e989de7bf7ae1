//! Reverse-mode autodiff over a flat op tape.
//!
//! A `Graph` owns every intermediate tensor of one forward pass. Ops push a
//! node and return a `Var` handle; `backward` walks the tape in reverse and
//! accumulates gradients additively, so fan-out falls out for free. Node
//! order is creation order — no hashing anywhere, which keeps replays
//! bit-identical.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: f64 },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    Concat1(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool2d { x: Var, kh: usize, kw: usize },
    BilinearUp { x: Var, factor: usize },
    SumAll(Var),
    MeanRows(Var),
    NllRows { probs: Var, targets: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires: bool,
    op: Op,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input: no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable leaf (parameters, grad-check points).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    // ── Elementwise and shape ops ──

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape, self.val(b).shape, "add shape mismatch");
        let data = zip_map(&self.val(a).data, &self.val(b).data, |x, y| x + y);
        let t = Tensor::new(self.val(a).shape.clone(), data);
        self.push(t, self.req(a) || self.req(b), Op::Add(a, b))
    }

    /// `[n x d] + [d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = self.val(x).dims2();
        assert_eq!(self.val(b).numel(), d, "bias length mismatch");
        let mut data = self.val(x).data.clone();
        let bd = &self.val(b).data;
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] = data[r * d + c] + bd[c];
            }
        }
        let t = Tensor::new(vec![n, d], data);
        self.push(t, self.req(x) || self.req(b), Op::AddBias(x, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape, self.val(b).shape, "sub shape mismatch");
        let data = zip_map(&self.val(a).data, &self.val(b).data, |x, y| x - y);
        let t = Tensor::new(self.val(a).shape.clone(), data);
        self.push(t, self.req(a) || self.req(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape, self.val(b).shape, "mul shape mismatch");
        let data = zip_map(&self.val(a).data, &self.val(b).data, |x, y| x * y);
        let t = Tensor::new(self.val(a).shape.clone(), data);
        self.push(t, self.req(a) || self.req(b), Op::Mul(a, b))
    }

    /// `mul * x + add` with f64 constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, a) = (lit::<T>(mul), lit::<T>(add));
        let data = self.val(x).data.iter().map(|&v| m * v + a).collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.val(a).dims2();
        let (kb, n) = self.val(b).dims2();
        assert_eq!(ka, kb, "matmul inner dims {} vs {}", ka, kb);
        let data = matmul_raw(&self.val(a).data, &self.val(b).data, m, ka, n);
        let t = Tensor::new(vec![m, n], data);
        self.push(t, self.req(a) || self.req(b), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.val(x).dims2();
        let src = &self.val(x).data;
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data);
        self.push(t, self.req(x), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.val(x).numel(),
            "reshape numel mismatch"
        );
        let t = Tensor::new(shape, self.val(x).data.clone());
        self.push(t, self.req(x), Op::Reshape(x))
    }

    /// Stack 2-d blocks along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.val(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (n, dp) = self.val(p).dims2();
            assert_eq!(dp, d, "concat_rows width mismatch");
            rows += n;
            data.extend_from_slice(&self.val(p).data);
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::new(vec![rows, d], data);
        self.push(t, req, Op::Concat0(parts.to_vec()))
    }

    /// Stack 2-d blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.val(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).dims2().1).collect();
        for &p in parts {
            assert_eq!(self.val(p).dims2().0, n, "concat_cols height mismatch");
        }
        let d: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * d];
        let mut off = 0;
        for (i, &p) in parts.iter().enumerate() {
            let w = widths[i];
            let src = &self.val(p).data;
            for r in 0..n {
                data[r * d + off..r * d + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::new(vec![n, d], data);
        self.push(t, req, Op::Concat1(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.val(x).dims2();
        assert!(start + len <= n, "slice_rows out of range");
        let data = self.val(x).data[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data);
        self.push(t, self.req(x), Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.val(x).dims2();
        assert!(start + len <= d, "slice_cols out of range");
        let src = &self.val(x).data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data);
        self.push(t, self.req(x), Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let (n, d) = self.val(x).dims2();
        let src = &self.val(x).data;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            assert!(r < n, "gather_rows index out of range");
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], data);
        self.push(t, self.req(x), Op::GatherRows { x, rows })
    }

    // ── Nonlinearities ──

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .val(x)
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let data = self
            .val(x)
            .data
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.val(x).data.iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.val(x).data.iter().map(|&v| v.abs()).collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Abs(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let data = self.val(x).data.iter().map(|&v| v.ln()).collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (lit::<T>(lo), lit::<T>(hi));
        let data = self
            .val(x)
            .data
            .iter()
            .map(|&v| if v < l { l } else if v > h { h } else { v })
            .collect();
        let t = Tensor::new(self.val(x).shape.clone(), data);
        self.push(t, self.req(x), Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax of a 2-d tensor, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, d) = self.val(x).dims2();
        let src = &self.val(x).data;
        let mut data = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for c in 0..d {
                let e = (row[c] - mx).exp();
                data[r * d + c] = e;
                sum = sum + e;
            }
            for c in 0..d {
                data[r * d + c] = data[r * d + c] / sum;
            }
        }
        let t = Tensor::new(vec![n, d], data);
        self.push(t, self.req(x), Op::Softmax(x))
    }

    /// Row-wise layer norm: `gamma * (x - mu) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.val(x).dims2();
        assert_eq!(self.val(gamma).numel(), d, "layer_norm gamma length");
        assert_eq!(self.val(beta).numel(), d, "layer_norm beta length");
        let src = &self.val(x).data;
        let gd = &self.val(gamma).data;
        let bd = &self.val(beta).data;
        let inv_d = lit::<T>(1.0 / d as f64);
        let epsv = lit::<T>(eps);
        let mut data = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mut mu = T::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu * inv_d;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mu) * (v - mu);
            }
            var = var * inv_d;
            let ivar = T::one() / (var + epsv).sqrt();
            for c in 0..d {
                data[r * d + c] = gd[c] * (row[c] - mu) * ivar + bd[c];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let t = Tensor::new(vec![n, d], data);
        self.push(t, req, Op::LayerNorm { x, gamma, beta, eps })
    }

    // ── Spatial ops (H x W x C feature maps) ──

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (h, wid, cin) = self.val(x).dims3();
        let ws = &self.val(w).shape;
        assert_eq!(ws.len(), 4, "conv weight must be [kh, kw, cin, cout]");
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv input channel mismatch");
        assert_eq!(self.val(b).numel(), cout, "conv bias length");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let col = im2col(&self.val(x).data, h, wid, cin, kh, kw, stride, pad);
        let k = kh * kw * cin;
        let mut data = matmul_raw(&col, &self.val(w).data, ho * wo, k, cout);
        let bd = &self.val(b).data;
        for r in 0..ho * wo {
            for c in 0..cout {
                data[r * cout + c] = data[r * cout + c] + bd[c];
            }
        }
        let req = self.req(x) || self.req(w) || self.req(b);
        let t = Tensor::new(vec![ho, wo, cout], data);
        self.push(t, req, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Non-overlapping average pooling; kernel must tile the map exactly.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let (h, w, c) = self.val(x).dims3();
        assert!(h % kh == 0 && w % kw == 0, "pool kernel must tile the map");
        let (ho, wo) = (h / kh, w / kw);
        let src = &self.val(x).data;
        let inv = lit::<T>(1.0 / (kh * kw) as f64);
        let mut data = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let src_row = &src[(((oy * kh + dy) * w) + ox * kw + dx) * c..][..c];
                        let dst = &mut data[(oy * wo + ox) * c..][..c];
                        for ch in 0..c {
                            dst[ch] = dst[ch] + src_row[ch];
                        }
                    }
                }
                let dst = &mut data[(oy * wo + ox) * c..][..c];
                for v in dst {
                    *v = *v * inv;
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], data);
        self.push(t, self.req(x), Op::AvgPool2d { x, kh, kw })
    }

    /// Integer-factor bilinear upsampling with half-pixel sample centers.
    pub fn bilinear_up(&mut self, x: Var, factor: usize) -> Var {
        let (h, w, c) = self.val(x).dims3();
        let (ho, wo) = (h * factor, w * factor);
        let ty = lerp_table(h, ho);
        let tx = lerp_table(w, wo);
        let src = &self.val(x).data;
        let mut data = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            let (y0, y1, fy) = ty[oy];
            let wy1 = lit::<T>(fy);
            let wy0 = T::one() - wy1;
            for ox in 0..wo {
                let (x0, x1, fx) = tx[ox];
                let wx1 = lit::<T>(fx);
                let wx0 = T::one() - wx1;
                let dst = &mut data[(oy * wo + ox) * c..][..c];
                for ch in 0..c {
                    let v = wy0 * wx0 * src[(y0 * w + x0) * c + ch]
                        + wy0 * wx1 * src[(y0 * w + x1) * c + ch]
                        + wy1 * wx0 * src[(y1 * w + x0) * c + ch]
                        + wy1 * wx1 * src[(y1 * w + x1) * c + ch];
                    dst[ch] = v;
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], data);
        self.push(t, self.req(x), Op::BilinearUp { x, factor })
    }

    // ── Reductions and losses ──

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in &self.val(x).data {
            s = s + v;
        }
        self.push(Tensor::scalar(s), self.req(x), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[n x d] -> [d]` column means (global average pooling on flattened maps).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.val(x).dims2();
        let src = &self.val(x).data;
        let inv = lit::<T>(1.0 / n as f64);
        let mut data = vec![T::zero(); d];
        for r in 0..n {
            for c in 0..d {
                data[c] = data[c] + src[r * d + c];
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let t = Tensor::new(vec![1, d], data);
        self.push(t, self.req(x), Op::MeanRows(x))
    }

    /// Mean negative log-likelihood of target classes given probability rows.
    pub fn nll_rows(&mut self, probs: Var, targets: Vec<usize>) -> Var {
        let (n, d) = self.val(probs).dims2();
        assert_eq!(targets.len(), n, "nll target count mismatch");
        let tiny = lit::<T>(NLL_FLOOR);
        let mut s = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < d, "nll class id {} out of range {}", t, d);
            let p = self.val(probs).data[r * d + t];
            let p = if p > tiny { p } else { tiny };
            s = s - p.ln();
        }
        let v = s * lit::<T>(1.0 / n as f64);
        self.push(
            Tensor::scalar(v),
            self.req(probs),
            Op::NllRows { probs, targets },
        )
    }

    // ── Backward ──

    /// Reverse pass from a scalar output. Gradients accumulate additively at
    /// fan-out nodes; leaves created with `param` end up with `grad` set.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.val(loss).numel(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].grad = Some(g);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let add_to = |grads: &mut [Option<Vec<T>>], v: Var, this: &Graph<T>, f: &mut dyn FnMut(&mut [T])| {
            if !this.req(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); this.val(v).numel()]);
            f(slot);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, self, &mut |s| axpy(s, g, T::one()));
                add_to(grads, *b, self, &mut |s| axpy(s, g, T::one()));
            }
            Op::AddBias(x, b) => {
                add_to(grads, *x, self, &mut |s| axpy(s, g, T::one()));
                let d = self.val(*b).numel();
                add_to(grads, *b, self, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, self, &mut |s| axpy(s, g, T::one()));
                add_to(grads, *b, self, &mut |s| axpy(s, g, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.val(*a).data, &self.val(*b).data);
                add_to(grads, *a, self, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    }
                });
                add_to(grads, *b, self, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * av[i];
                    }
                });
            }
            Op::Affine { x, mul } => {
                let m = lit::<T>(*mul);
                add_to(grads, *x, self, &mut |s| axpy(s, g, m));
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).dims2().1;
                let (av, bv) = (&self.val(*a).data, &self.val(*b).data);
                add_to(grads, *a, self, &mut |s| {
                    // dA += g . B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc = acc + grow[j] * brow[j];
                            }
                            s[i * k + kk] = s[i * k + kk] + acc;
                        }
                    }
                });
                add_to(grads, *b, self, &mut |s| {
                    // dB += A^T . g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            if a_ik != T::zero() {
                                let srow = &mut s[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    srow[j] = srow[j] + a_ik * grow[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = self.val(*x).dims2();
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] = s[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                add_to(grads, *x, self, &mut |s| axpy(s, g, T::one()));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    add_to(grads, p, self, &mut |s| axpy(s, &g[off..off + n], T::one()));
                    off += n;
                }
            }
            Op::Concat1(parts) => {
                let rows = self.val(parts[0]).dims2().0;
                let total: usize = parts.iter().map(|&p| self.val(p).dims2().1).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).dims2().1;
                    add_to(grads, p, self, &mut |s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] = s[r * w + c] + g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let d = self.val(*x).dims2().1;
                add_to(grads, *x, self, &mut |s| {
                    axpy(&mut s[start * d..(start + len) * d], g, T::one());
                });
            }
            Op::SliceCols { x, start, len } => {
                let (n, d) = self.val(*x).dims2();
                add_to(grads, *x, self, &mut |s| {
                    for r in 0..n {
                        for c in 0..*len {
                            s[r * d + start + c] = s[r * d + start + c] + g[r * len + c];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = self.val(*x).dims2().1;
                add_to(grads, *x, self, &mut |s| {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut s[r * d..(r + 1) * d], &g[i * d..(i + 1) * d], T::one());
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.val(*x).data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > T::zero() {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].value.data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * yv[i] * (T::one() - yv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[id].value.data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * (T::one() - yv[i] * yv[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = &self.val(*x).data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > T::zero() {
                            s[i] = s[i] + g[i];
                        } else if xv[i] < T::zero() {
                            s[i] = s[i] - g[i];
                        }
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &self.val(*x).data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] / xv[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (lit::<T>(*lo), lit::<T>(*hi));
                let xv = &self.val(*x).data;
                add_to(grads, *x, self, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > l && xv[i] < h {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (n, d) = self.val(*x).dims2();
                let p = &self.nodes[id].value.data;
                add_to(grads, *x, self, &mut |s| {
                    for r in 0..n {
                        let pr = &p[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = T::zero();
                        for c in 0..d {
                            dot = dot + pr[c] * gr[c];
                        }
                        for c in 0..d {
                            s[r * d + c] = s[r * d + c] + pr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, d) = self.val(*x).dims2();
                let xv = &self.val(*x).data;
                let gv = &self.val(*gamma).data;
                let inv_d = lit::<T>(1.0 / d as f64);
                let epsv = lit::<T>(*eps);
                // Per-row stats recomputed: cheaper than stashing them.
                let mut stats = Vec::with_capacity(n);
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let mut mu = T::zero();
                    for &v in row {
                        mu = mu + v;
                    }
                    mu = mu * inv_d;
                    let mut var = T::zero();
                    for &v in row {
                        var = var + (v - mu) * (v - mu);
                    }
                    var = var * inv_d;
                    stats.push((mu, T::one() / (var + epsv).sqrt()));
                }
                add_to(grads, *x, self, &mut |s| {
                    for r in 0..n {
                        let (mu, ivar) = stats[r];
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for c in 0..d {
                            let xhat = (row[c] - mu) * ivar;
                            let dxhat = gr[c] * gv[c];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for c in 0..d {
                            let xhat = (row[c] - mu) * ivar;
                            let dxhat = gr[c] * gv[c];
                            let v = (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat) * ivar;
                            s[r * d + c] = s[r * d + c] + v;
                        }
                    }
                });
                add_to(grads, *gamma, self, &mut |s| {
                    for r in 0..n {
                        let (mu, ivar) = stats[r];
                        for c in 0..d {
                            let xhat = (xv[r * d + c] - mu) * ivar;
                            s[c] = s[c] + g[r * d + c] * xhat;
                        }
                    }
                });
                add_to(grads, *beta, self, &mut |s| {
                    for r in 0..n {
                        for c in 0..d {
                            s[c] = s[c] + g[r * d + c];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (h, wid, cin) = self.val(*x).dims3();
                let ws = &self.val(*w).shape;
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wid + 2 * pad - kw) / stride + 1;
                let k = kh * kw * cin;
                let rows = ho * wo;
                add_to(grads, *w, self, &mut |s| {
                    // dW += col^T . g
                    let col = im2col(&self.val(*x).data, h, wid, cin, kh, kw, *stride, *pad);
                    for r in 0..rows {
                        let grow = &g[r * cout..(r + 1) * cout];
                        for kk in 0..k {
                            let c_rk = col[r * k + kk];
                            if c_rk != T::zero() {
                                let srow = &mut s[kk * cout..(kk + 1) * cout];
                                for j in 0..cout {
                                    srow[j] = srow[j] + c_rk * grow[j];
                                }
                            }
                        }
                    }
                });
                add_to(grads, *b, self, &mut |s| {
                    for r in 0..rows {
                        for j in 0..cout {
                            s[j] = s[j] + g[r * cout + j];
                        }
                    }
                });
                add_to(grads, *x, self, &mut |s| {
                    // dcol = g . W^T, then scatter back through im2col.
                    let wv = &self.val(*w).data;
                    let mut dcol = vec![T::zero(); rows * k];
                    for r in 0..rows {
                        let grow = &g[r * cout..(r + 1) * cout];
                        for kk in 0..k {
                            let wrow = &wv[kk * cout..(kk + 1) * cout];
                            let mut acc = T::zero();
                            for j in 0..cout {
                                acc = acc + grow[j] * wrow[j];
                            }
                            dcol[r * k + kk] = acc;
                        }
                    }
                    col2im_add(&dcol, s, h, wid, cin, kh, kw, *stride, *pad);
                });
            }
            Op::AvgPool2d { x, kh, kw } => {
                let (h, w, c) = self.val(*x).dims3();
                let (ho, wo) = (h / kh, w / kw);
                let inv = lit::<T>(1.0 / (kh * kw) as f64);
                add_to(grads, *x, self, &mut |s| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &g[(oy * wo + ox) * c..][..c];
                            for dy in 0..*kh {
                                for dx in 0..*kw {
                                    let base = (((oy * kh + dy) * w) + ox * kw + dx) * c;
                                    for ch in 0..c {
                                        s[base + ch] = s[base + ch] + grow[ch] * inv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BilinearUp { x, factor } => {
                let (h, w, c) = self.val(*x).dims3();
                let (ho, wo) = (h * factor, w * factor);
                let ty = lerp_table(h, ho);
                let tx = lerp_table(w, wo);
                add_to(grads, *x, self, &mut |s| {
                    for oy in 0..ho {
                        let (y0, y1, fy) = ty[oy];
                        let wy1 = lit::<T>(fy);
                        let wy0 = T::one() - wy1;
                        for ox in 0..wo {
                            let (x0, x1, fx) = tx[ox];
                            let wx1 = lit::<T>(fx);
                            let wx0 = T::one() - wx1;
                            let grow = &g[(oy * wo + ox) * c..][..c];
                            for ch in 0..c {
                                s[(y0 * w + x0) * c + ch] = s[(y0 * w + x0) * c + ch] + wy0 * wx0 * grow[ch];
                                s[(y0 * w + x1) * c + ch] = s[(y0 * w + x1) * c + ch] + wy0 * wx1 * grow[ch];
                                s[(y1 * w + x0) * c + ch] = s[(y1 * w + x0) * c + ch] + wy1 * wx0 * grow[ch];
                                s[(y1 * w + x1) * c + ch] = s[(y1 * w + x1) * c + ch] + wy1 * wx1 * grow[ch];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                add_to(grads, *x, self, &mut |s| {
                    for v in s.iter_mut() {
                        *v = *v + gv;
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, d) = self.val(*x).dims2();
                let inv = lit::<T>(1.0 / n as f64);
                add_to(grads, *x, self, &mut |s| {
                    for r in 0..n {
                        for c in 0..d {
                            s[r * d + c] = s[r * d + c] + g[c] * inv;
                        }
                    }
                });
            }
            Op::NllRows { probs, targets } => {
                let (n, d) = self.val(*probs).dims2();
                let pv = &self.val(*probs).data;
                let tiny = lit::<T>(NLL_FLOOR);
                let inv_n = lit::<T>(1.0 / n as f64);
                let gv = g[0];
                add_to(grads, *probs, self, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pv[r * d + t];
                        if p > tiny {
                            s[r * d + t] = s[r * d + t] - gv * inv_n / p;
                        }
                    }
                });
            }
        }
    }
}

/// Probabilities below this floor contribute a constant to NLL losses
/// instead of an unbounded log term.
const NLL_FLOOR: f64 = 1e-12;

// ── Raw kernels ──

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], scale: T) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] = dst[i] + src[i] * scale;
    }
}

/// `[m x k] . [k x n]`, i-k-j order so the inner loop runs over contiguous rows.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik != T::zero() {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a_ik * brow[j];
                }
            }
        }
    }
    out
}

/// Gather conv patches into `[ho*wo, kh*kw*cin]` rows (HWC layout).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * cin;
    let mut col = vec![T::zero(); ho * wo * k];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut col[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for dy in 0..kh {
                let sy = (oy * stride + dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = (ox * stride + dx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[((sy as usize) * w + sx as usize) * cin..][..cin];
                    dst[(dy * kw + dx) * cin..(dy * kw + dx + 1) * cin].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Scatter-add a column gradient back onto the input map.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    dcol: &[T],
    dx: &mut [T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &dcol[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
            for ky in 0..kh {
                let sy = (oy * stride + ky) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = ((sy as usize) * w + sx as usize) * cin;
                    for ch in 0..cin {
                        dx[base + ch] = dx[base + ch] + src[(ky * kw + kx) * cin + ch];
                    }
                }
            }
        }
    }
}

/// Half-pixel source coordinates for integer-factor bilinear resampling:
/// `(lo_index, hi_index, hi_weight)` per output position.
fn lerp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0).min(src as f64 - 1.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}
