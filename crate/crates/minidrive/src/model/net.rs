//! The fusion network: twin convolutional backbones that exchange
//! information at the deepest scales, a compact readout, an autoregressive
//! waypoint decoder, and dense auxiliary heads.
//!
//! Parameters live in a [`ParamStore`] with a fixed insertion order; a
//! forward pass binds them into a fresh [`Graph`] so the same stored
//! weights can run the f32 training path or the f64 verification path.

use std::collections::HashMap;
use std::path::Path;

use minigrad::{
    gru_step, linear, load_checkpoint, save_checkpoint, transformer_layer, CheckpointError,
    Graph, GruParams, Scalar, Tensor, TransformerLayerParams, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{REG_CH, YAW_BINS};
use crate::geom::Vec2;
use crate::model::config::{bev_dims, img_dims, ConfigError, FusionConfig, FusionDirection, Readout, Variant};
use crate::sensors::{focal, RenderedFrame, BEV_CELL, BEV_HALF, BEV_N, BEV_RANGE, CAM_H, CAM_HEIGHT, CAM_W, HDMAP_CLASSES, SEM_CLASSES};

/// Correspondence sampling is architecture, not weights: a fixed seed keeps
/// the tables identical across models, checkpoints, and processes.
const GEO_SEED: u64 = 0x67656f6d;
const GEO_POINTS: usize = 5;
const EMBED_STD: f64 = 0.02;

// ── parameter store ──

/// Named tensors in insertion order. The order is the binding order, the
/// optimizer's slot order, and the checkpoint blob order.
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> ParamStore {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        let prev = self.index.insert(name.clone(), self.tensors.len());
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.tensors[self.idx(name)]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

// ── model ──

/// Sparse 0/1 aggregation tables for one geometrically fused scale, stored
/// dense so the exchange is two matmuls. Rows with no correspondence carry
/// a zero mask so the exchange MLP cannot leak its bias into them.
struct GeoScale {
    i2b: Tensor<f32>,
    i2b_mask: Tensor<f32>,
    b2i: Tensor<f32>,
    b2i_mask: Tensor<f32>,
}

pub struct Model {
    pub cfg: FusionConfig,
    pub params: ParamStore,
    geo: Vec<GeoScale>,
}

fn tt<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(t.shape.clone(), t.data.iter().map(|&v| T::from_f64(v as f64)).collect())
}

impl Model {
    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Model, ConfigError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.channels;
        let d = ch[3];

        // Weights feeding a ReLU carry a sqrt(6) gain over the plain
        // 1/sqrt(fan_in) bound; without it (and with no normalization
        // layers) activations and gradients shrink geometrically with depth.
        let relu_gain = 6f32.sqrt();
        let conv = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize, cin: usize, cout: usize, gain: f32| {
            let w = Tensor::uniform_init(vec![k, k, cin, cout], k * k * cin, rng);
            ps.add(format!("{name}.w"), w.map(|x: f32| x * gain));
            ps.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        let lin = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, gain: f32| {
            let w = Tensor::uniform_init(vec![din, dout], din, rng);
            ps.add(format!("{name}.w"), w.map(|x: f32| x * gain));
            ps.add(format!("{name}.b"), Tensor::zeros(vec![dout]));
        };

        let mut cin = 3;
        for k in 0..4 {
            conv(&mut ps, rng, &format!("img.s{k}"), 3, cin, ch[k], relu_gain);
            cin = ch[k];
        }
        cin = cfg.bev_in_channels();
        for k in 0..4 {
            conv(&mut ps, rng, &format!("bev.s{k}"), 3, cin, ch[k], relu_gain);
            cin = ch[k];
        }

        for k in cfg.fused_stages() {
            let c = ch[k];
            match cfg.variant {
                Variant::Transformer | Variant::Latent => {
                    ps.add(
                        format!("fuse.s{k}.pos"),
                        Tensor::normal_init(vec![cfg.token_count(), c], EMBED_STD, rng),
                    );
                    if cfg.velocity_input {
                        lin(&mut ps, rng, &format!("fuse.s{k}.vel"), 1, c, 1.0);
                    }
                    for l in 0..cfg.layers_per_scale {
                        let p = format!("fuse.s{k}.l{l}");
                        for m in ["wq", "wk", "wv", "wo"] {
                            ps.add(format!("{p}.{m}"), Tensor::uniform_init(vec![c, c], c, rng));
                        }
                        ps.add(format!("{p}.m1w"), Tensor::uniform_init(vec![c, 4 * c], c, rng));
                        ps.add(format!("{p}.m1b"), Tensor::zeros(vec![4 * c]));
                        ps.add(format!("{p}.m2w"), Tensor::uniform_init(vec![4 * c, c], 4 * c, rng));
                        ps.add(format!("{p}.m2b"), Tensor::zeros(vec![c]));
                    }
                }
                Variant::Geometric => {
                    let (h0, h1) = cfg.geo_hidden;
                    for dir in ["i2b", "b2i"] {
                        lin(&mut ps, rng, &format!("geo.s{k}.{dir}.0"), c, h0, relu_gain);
                        lin(&mut ps, rng, &format!("geo.s{k}.{dir}.1"), h0, h1, relu_gain);
                        lin(&mut ps, rng, &format!("geo.s{k}.{dir}.2"), h1, c, 1.0);
                    }
                }
                Variant::Late => unreachable!("late fusion has no fused stages"),
            }
        }

        if cfg.readout == Readout::AttentionToken {
            ps.add("fuse.token", Tensor::normal_init(vec![1, d], EMBED_STD, rng));
        }
        lin(&mut ps, rng, "reduce.1", d, d, relu_gain);
        lin(&mut ps, rng, "reduce.2", d, d, 1.0);

        for gate in ["z", "r", "n"] {
            ps.add(format!("gru.w{gate}"), Tensor::uniform_init(vec![4, d], 4, rng));
            ps.add(format!("gru.u{gate}"), Tensor::uniform_init(vec![d, d], d, rng));
            ps.add(format!("gru.b{gate}"), Tensor::zeros(vec![d]));
        }
        lin(&mut ps, rng, "wp", d, 2, 1.0);

        // Decoder trunks mirror the backbone widths on the way back up.
        let widths = [ch[2], ch[1], ch[0]];
        for head in ["dep", "sem", "map", "det"] {
            let mut tin = d;
            for (j, &w) in widths.iter().enumerate() {
                conv(&mut ps, rng, &format!("{head}.u{j}"), 3, tin, w, relu_gain);
                tin = w;
            }
        }
        conv(&mut ps, rng, "dep.out", 1, ch[0], 1, 1.0);
        conv(&mut ps, rng, "sem.out", 1, ch[0], SEM_CLASSES, 1.0);
        conv(&mut ps, rng, "map.out", 1, ch[0], HDMAP_CLASSES, 1.0);
        conv(&mut ps, rng, "det.pos", 1, ch[0], 1, 1.0);
        conv(&mut ps, rng, "det.ori", 1, ch[0], YAW_BINS, 1.0);
        conv(&mut ps, rng, "det.reg", 1, ch[0], REG_CH, 1.0);

        let geo = if cfg.variant == Variant::Geometric { geo_tables(&cfg) } else { Vec::new() };
        Ok(Model { cfg, params: ps, geo })
    }

    /// Rebuild around an existing parameter set (checkpoint load). Names and
    /// shapes must match a fresh construction exactly.
    fn from_parts(cfg: FusionConfig, params: ParamStore) -> Result<Model, String> {
        let fresh = Model::new(cfg, 0).map_err(|e| e.to_string())?;
        if fresh.params.names() != params.names() {
            return Err("checkpoint parameter names do not match the configuration".into());
        }
        for (name, t) in params.iter() {
            if t.shape != fresh.params.get(name).shape {
                return Err(format!("checkpoint tensor {name} has the wrong shape"));
            }
        }
        Ok(Model { params, ..fresh })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Bind every parameter into `g`, in store order.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.params.tensors().iter().map(|t| g.param(tt(t))).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut blobs = vec![("cfg".to_string(), encode_cfg(&self.cfg))];
        blobs.extend(self.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        save_checkpoint(path, &blobs)
    }

    pub fn load(path: &Path) -> Result<Model, LoadError> {
        let blobs = load_checkpoint(path)?;
        let mut cfg = None;
        let mut ps = ParamStore::new();
        for (name, t) in blobs {
            if name == "cfg" {
                cfg = Some(decode_cfg(&t).map_err(LoadError::Malformed)?);
            } else {
                ps.add(name, t);
            }
        }
        let cfg = cfg.ok_or_else(|| LoadError::Malformed("missing cfg blob".into()))?;
        Model::from_parts(cfg, ps).map_err(LoadError::Malformed)
    }

    /// One inference pass on a fresh f32 graph.
    pub fn infer(&self, obs: &Obs) -> Result<ModelOutput, ModelFault> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g);
        let fo = self.forward(&mut g, &bound, obs);
        extract(&g, &fo)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint: {0}")]
    Malformed(String),
}

// ── config blob ──

fn encode_cfg(cfg: &FusionConfig) -> Tensor<f32> {
    let v = vec![
        match cfg.variant {
            Variant::Transformer => 0.0,
            Variant::Latent => 1.0,
            Variant::Late => 2.0,
            Variant::Geometric => 3.0,
        },
        cfg.scales_fused as f32,
        cfg.layers_per_scale as f32,
        cfg.heads as f32,
        cfg.channels[0] as f32,
        cfg.channels[1] as f32,
        cfg.channels[2] as f32,
        cfg.channels[3] as f32,
        cfg.img_tokens.0 as f32,
        cfg.img_tokens.1 as f32,
        cfg.bev_tokens.0 as f32,
        cfg.bev_tokens.1 as f32,
        match cfg.direction {
            FusionDirection::Both => 0.0,
            FusionDirection::CameraToBev => 1.0,
            FusionDirection::BevToCamera => 2.0,
        },
        match cfg.readout {
            Readout::GlobalAverage => 0.0,
            Readout::AttentionToken => 1.0,
        },
        cfg.velocity_input as u8 as f32,
        cfg.geo_hidden.0 as f32,
        cfg.geo_hidden.1 as f32,
        cfg.waypoints as f32,
    ];
    Tensor::new(vec![v.len()], v)
}

fn decode_cfg(t: &Tensor<f32>) -> Result<FusionConfig, String> {
    if t.numel() != 18 {
        return Err(format!("cfg blob has {} values, expected 18", t.numel()));
    }
    let u = |i: usize| t.data[i] as usize;
    let cfg = FusionConfig {
        variant: match t.data[0] as u32 {
            0 => Variant::Transformer,
            1 => Variant::Latent,
            2 => Variant::Late,
            3 => Variant::Geometric,
            k => return Err(format!("unknown variant code {k}")),
        },
        scales_fused: u(1),
        layers_per_scale: u(2),
        heads: u(3),
        channels: [u(4), u(5), u(6), u(7)],
        img_tokens: (u(8), u(9)),
        bev_tokens: (u(10), u(11)),
        direction: match t.data[12] as u32 {
            0 => FusionDirection::Both,
            1 => FusionDirection::CameraToBev,
            2 => FusionDirection::BevToCamera,
            k => return Err(format!("unknown direction code {k}")),
        },
        readout: match t.data[13] as u32 {
            0 => Readout::GlobalAverage,
            1 => Readout::AttentionToken,
            k => return Err(format!("unknown readout code {k}")),
        },
        velocity_input: t.data[14] != 0.0,
        geo_hidden: (u(15), u(16)),
        waypoints: u(17),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

// ── observation ──

/// Network inputs for one frame, in the ego frame.
#[derive(Clone)]
pub struct Obs {
    pub camera: Tensor<f32>,
    pub bev: Tensor<f32>,
    pub speed: f64,
    pub goal: Vec2,
}

impl Obs {
    pub fn from_frame(f: &RenderedFrame) -> Obs {
        Obs {
            camera: f.camera.rgb.clone(),
            bev: f.bev.clone(),
            speed: f.speed,
            goal: f.goal_local,
        }
    }
}

/// 2-channel coordinate grid fed to the latent variant in place of the
/// occupancy histogram: each axis runs -1..1 inclusive.
pub fn latent_grid() -> Tensor<f32> {
    let n = BEV_N;
    let mut data = vec![0.0f32; n * n * 2];
    for r in 0..n {
        for c in 0..n {
            data[(r * n + c) * 2] = -1.0 + 2.0 * r as f32 / (n - 1) as f32;
            data[(r * n + c) * 2 + 1] = -1.0 + 2.0 * c as f32 / (n - 1) as f32;
        }
    }
    Tensor::new(vec![n, n, 2], data)
}

// ── forward pass ──

/// Graph handles for everything a loss or a report reads.
pub struct ForwardOut {
    /// `[waypoints x 2]`, cumulative offsets from the ego origin.
    pub waypoints: Var,
    /// `[CAM_H x CAM_W x 1]`, normalized depth in 0..1.
    pub depth: Var,
    /// `[CAM_H*CAM_W x SEM_CLASSES]` probability rows.
    pub semantics: Var,
    /// `[HDMAP_N*HDMAP_N x HDMAP_CLASSES]` probability rows.
    pub hdmap: Var,
    /// `[DET_N x DET_N x 1]` center-ness in 0..1.
    pub det_pos: Var,
    /// `[DET_N*DET_N x YAW_BINS]` logits.
    pub det_ori: Var,
    /// `[DET_N x DET_N x REG_CH]`.
    pub det_reg: Var,
    /// `[1 x channels[3]]` bottleneck feature.
    pub feature: Var,
    /// Final-layer attention weights per fused transformer (shallow to
    /// deep), one matrix per head.
    pub attention: Vec<Vec<Var>>,
    /// Token index ranges (image, birds-eye) for each entry of `attention`.
    pub attn_ranges: Vec<(std::ops::Range<usize>, std::ops::Range<usize>)>,
}

struct Net<'a> {
    model: &'a Model,
    bound: &'a Bound,
}

pub struct Bound {
    pub vars: Vec<Var>,
}

impl Net<'_> {
    fn v(&self, name: &str) -> Var {
        self.bound.vars[self.model.params.idx(name)]
    }

    fn layer(&self, stage: usize, l: usize) -> TransformerLayerParams {
        let p = format!("fuse.s{stage}.l{l}");
        TransformerLayerParams {
            wq: self.v(&format!("{p}.wq")),
            wk: self.v(&format!("{p}.wk")),
            wv: self.v(&format!("{p}.wv")),
            wo: self.v(&format!("{p}.wo")),
            mlp_w1: self.v(&format!("{p}.m1w")),
            mlp_b1: self.v(&format!("{p}.m1b")),
            mlp_w2: self.v(&format!("{p}.m2w")),
            mlp_b2: self.v(&format!("{p}.m2b")),
        }
    }

    fn gru(&self) -> GruParams {
        GruParams {
            wz: self.v("gru.wz"),
            uz: self.v("gru.uz"),
            bz: self.v("gru.bz"),
            wr: self.v("gru.wr"),
            ur: self.v("gru.ur"),
            br: self.v("gru.br"),
            wn: self.v("gru.wn"),
            un: self.v("gru.un"),
            bn: self.v("gru.bn"),
        }
    }
}

impl Model {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, obs: &Obs) -> ForwardOut {
        let cfg = &self.cfg;
        let net = Net { model: self, bound };

        let mut img = g.input(tt(&obs.camera));
        let bev_in = match cfg.variant {
            Variant::Latent => latent_grid(),
            _ => obs.bev.clone(),
        };
        let mut bev = g.input(tt(&bev_in));
        let speed = g.input(Tensor::new(vec![1, 1], vec![T::from_f64(obs.speed)]));

        let mut attention = Vec::new();
        let mut attn_ranges = Vec::new();
        let mut readout_row = None;

        for k in 0..4 {
            img = stage(g, &net, "img", k, img, k < 3);
            bev = stage(g, &net, "bev", k, bev, true);
            if !cfg.fused_stages().contains(&k) {
                continue;
            }
            match cfg.variant {
                Variant::Transformer | Variant::Latent => {
                    let want_token = cfg.readout == Readout::AttentionToken && k == 3;
                    let f = fuse_tokens(g, &net, k, img, bev, speed, want_token);
                    img = f.img;
                    bev = f.bev;
                    attention.push(f.heads);
                    attn_ranges.push(f.ranges);
                    if let Some(r) = f.readout {
                        readout_row = Some(r);
                    }
                }
                Variant::Geometric => {
                    let table = &self.geo[k - cfg.fused_stages().start];
                    let (i, b) = geo_fuse(g, &net, k, img, bev, table, cfg.direction);
                    img = i;
                    bev = b;
                }
                Variant::Late => unreachable!(),
            }
        }

        let d = cfg.channels[3];
        let feature0 = match readout_row {
            Some(r) => r,
            None => {
                let (ih, iw, _) = g.val(img).dims3();
                let (bh, bw, _) = g.val(bev).dims3();
                let iv = g.reshape(img, vec![ih * iw, d]);
                let iv = g.mean_rows(iv);
                let bv = g.reshape(bev, vec![bh * bw, d]);
                let bv = g.mean_rows(bv);
                g.add(iv, bv)
            }
        };
        let f1 = linear(g, feature0, net.v("reduce.1.w"), net.v("reduce.1.b"));
        let f1 = g.relu(f1);
        let feature = linear(g, f1, net.v("reduce.2.w"), net.v("reduce.2.b"));

        let waypoints = decode_waypoints(g, &net, feature, obs.goal, cfg.waypoints);

        let dt = trunk(g, &net, "dep", img);
        let dl = g.conv2d(dt, net.v("dep.out.w"), net.v("dep.out.b"), 1, 0);
        let depth = g.sigmoid(dl);

        let st = trunk(g, &net, "sem", img);
        let sl = g.conv2d(st, net.v("sem.out.w"), net.v("sem.out.b"), 1, 0);
        let sl = g.reshape(sl, vec![CAM_H * CAM_W, SEM_CLASSES]);
        let semantics = g.softmax(sl);

        let mt = trunk(g, &net, "map", bev);
        let (mh, mw, _) = g.val(mt).dims3();
        let ml = g.conv2d(mt, net.v("map.out.w"), net.v("map.out.b"), 1, 0);
        let ml = g.reshape(ml, vec![mh * mw, HDMAP_CLASSES]);
        let hdmap = g.softmax(ml);

        let kt = trunk(g, &net, "det", bev);
        let (kh, kw, _) = g.val(kt).dims3();
        let pl = g.conv2d(kt, net.v("det.pos.w"), net.v("det.pos.b"), 1, 0);
        let det_pos = g.sigmoid(pl);
        let ol = g.conv2d(kt, net.v("det.ori.w"), net.v("det.ori.b"), 1, 0);
        let det_ori = g.reshape(ol, vec![kh * kw, YAW_BINS]);
        let det_reg = g.conv2d(kt, net.v("det.reg.w"), net.v("det.reg.b"), 1, 0);

        ForwardOut {
            waypoints,
            depth,
            semantics,
            hdmap,
            det_pos,
            det_ori,
            det_reg,
            feature,
            attention,
            attn_ranges,
        }
    }
}

fn stage<T: Scalar>(g: &mut Graph<T>, net: &Net, branch: &str, k: usize, x: Var, pool: bool) -> Var {
    let y = g.conv2d(x, net.v(&format!("{branch}.s{k}.w")), net.v(&format!("{branch}.s{k}.b")), 1, 1);
    let y = g.relu(y);
    if pool {
        g.avg_pool2d(y, 2, 2)
    } else {
        y
    }
}

struct Fused {
    img: Var,
    bev: Var,
    heads: Vec<Var>,
    ranges: (std::ops::Range<usize>, std::ops::Range<usize>),
    readout: Option<Var>,
}

/// Token fusion at stage `k`: pool both maps to the shared token grids,
/// run the transformer over the joint sequence (image tokens first), then
/// upsample the token deltas and add them back. Measuring the delta against
/// the post-embedding sequence keeps a zero-parameter transformer an exact
/// identity on both branches.
fn fuse_tokens<T: Scalar>(
    g: &mut Graph<T>,
    net: &Net,
    k: usize,
    img: Var,
    bev: Var,
    speed: Var,
    want_token: bool,
) -> Fused {
    let cfg = &net.model.cfg;
    let (ih, _, c) = g.val(img).dims3();
    let (bh, _, _) = g.val(bev).dims3();
    let (ith, itw) = cfg.img_tokens;
    let (bth, btw) = cfg.bev_tokens;
    let (ni, nb) = (ith * itw, bth * btw);
    let fi = ih / ith;
    let fb = bh / bth;

    let it3 = if fi > 1 { g.avg_pool2d(img, fi, fi) } else { img };
    let img_tok = g.reshape(it3, vec![ni, c]);
    let bt3 = if fb > 1 { g.avg_pool2d(bev, fb, fb) } else { bev };
    let bev_tok = g.reshape(bt3, vec![nb, c]);

    let body = g.concat_rows(&[img_tok, bev_tok]);
    let body = g.add(body, net.v(&format!("fuse.s{k}.pos")));
    let body = if cfg.velocity_input {
        let vel = linear(g, speed, net.v(&format!("fuse.s{k}.vel.w")), net.v(&format!("fuse.s{k}.vel.b")));
        g.add_bias(body, vel)
    } else {
        body
    };
    let seq_in = if want_token {
        g.concat_rows(&[net.v("fuse.token"), body])
    } else {
        body
    };

    let mut seq = seq_in;
    let mut heads = Vec::new();
    for l in 0..cfg.layers_per_scale {
        let (s, ws) = transformer_layer(g, seq, &net.layer(k, l), cfg.heads);
        seq = s;
        heads = ws;
    }

    let off = want_token as usize;
    let img_out = g.slice_rows(seq, off, ni);
    let bev_out = g.slice_rows(seq, off + ni, nb);
    let img_ref = g.slice_rows(seq_in, off, ni);
    let bev_ref = g.slice_rows(seq_in, off + ni, nb);

    let img2 = if cfg.direction == FusionDirection::CameraToBev {
        img
    } else {
        let di = g.sub(img_out, img_ref);
        let di = g.reshape(di, vec![ith, itw, c]);
        let di = if fi > 1 { g.bilinear_up(di, fi) } else { di };
        g.add(img, di)
    };
    let bev2 = if cfg.direction == FusionDirection::BevToCamera {
        bev
    } else {
        let db = g.sub(bev_out, bev_ref);
        let db = g.reshape(db, vec![bth, btw, c]);
        let db = if fb > 1 { g.bilinear_up(db, fb) } else { db };
        g.add(bev, db)
    };

    Fused {
        img: img2,
        bev: bev2,
        heads,
        ranges: (off..off + ni, off + ni..off + ni + nb),
        readout: want_token.then(|| g.slice_rows(seq, 0, 1)),
    }
}

fn mlp3<T: Scalar>(g: &mut Graph<T>, net: &Net, stage: usize, dir: &str, x: Var) -> Var {
    let p = format!("geo.s{stage}.{dir}");
    let h = linear(g, x, net.v(&format!("{p}.0.w")), net.v(&format!("{p}.0.b")));
    let h = g.relu(h);
    let h = linear(g, h, net.v(&format!("{p}.1.w")), net.v(&format!("{p}.1.b")));
    let h = g.relu(h);
    linear(g, h, net.v(&format!("{p}.2.w")), net.v(&format!("{p}.2.b")))
}

/// Projection fusion at stage `k`: each destination row receives the sum of
/// its geometric correspondents, mapped through a small MLP and added
/// residually. Both updates read the pre-exchange features.
fn geo_fuse<T: Scalar>(
    g: &mut Graph<T>,
    net: &Net,
    k: usize,
    img: Var,
    bev: Var,
    table: &GeoScale,
    direction: FusionDirection,
) -> (Var, Var) {
    let (ih, iw, c) = g.val(img).dims3();
    let (bh, bw, _) = g.val(bev).dims3();
    let img_flat = g.reshape(img, vec![ih * iw, c]);
    let bev_flat = g.reshape(bev, vec![bh * bw, c]);

    let bev2 = if direction == FusionDirection::BevToCamera {
        bev
    } else {
        let agg = g.input(tt(&table.i2b));
        let summed = g.matmul(agg, img_flat);
        let h = mlp3(g, net, k, "i2b", summed);
        let mask = g.input(tt(&table.i2b_mask));
        let h = g.mul(h, mask);
        let v = g.add(bev_flat, h);
        g.reshape(v, vec![bh, bw, c])
    };
    let img2 = if direction == FusionDirection::CameraToBev {
        img
    } else {
        let agg = g.input(tt(&table.b2i));
        let summed = g.matmul(agg, bev_flat);
        let h = mlp3(g, net, k, "b2i", summed);
        let mask = g.input(tt(&table.b2i_mask));
        let h = g.mul(h, mask);
        let v = g.add(img_flat, h);
        g.reshape(v, vec![ih, iw, c])
    };
    (img2, bev2)
}

/// Roll the GRU forward `n` steps from the bottleneck feature; each step
/// reads the previous waypoint and the goal, and emits an offset added to
/// the running position.
/// Positions entering the recurrence are scaled to roughly unit range so
/// the gates stay out of saturation; predictions remain in meters.
const WP_IN_SCALE: f64 = 0.1;

fn decode_waypoints<T: Scalar>(g: &mut Graph<T>, net: &Net, feature: Var, goal: Vec2, n: usize) -> Var {
    let goal_in = g.input(Tensor::new(vec![1, 2], vec![T::from_f64(goal.x), T::from_f64(goal.y)]));
    let gru = net.gru();
    let mut h = feature;
    let mut wp = g.input(Tensor::zeros(vec![1, 2]));
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let pos = g.concat_cols(&[wp, goal_in]);
        let x = g.scale(pos, WP_IN_SCALE);
        h = gru_step(g, x, h, &gru);
        let delta = linear(g, h, net.v("wp.w"), net.v("wp.b"));
        wp = g.add(wp, delta);
        rows.push(wp);
    }
    g.concat_rows(&rows)
}

fn trunk<T: Scalar>(g: &mut Graph<T>, net: &Net, head: &str, x: Var) -> Var {
    let mut cur = x;
    for j in 0..3 {
        cur = g.bilinear_up(cur, 2);
        cur = g.conv2d(cur, net.v(&format!("{head}.u{j}.w")), net.v(&format!("{head}.u{j}.b")), 1, 1);
        cur = g.relu(cur);
    }
    cur
}

// ── geometric correspondence tables ──

/// Camera column center for azimuth `az` (radians, positive left), in
/// continuous full-resolution coordinates where pixel `u` spans `u..u+1`.
fn cam_u(az: f64) -> f64 {
    CAM_W as f64 / 2.0 - focal() * az.tan()
}

/// Camera row center for a ground point at planar distance `dist`.
fn cam_v(dist: f64) -> f64 {
    CAM_H as f64 / 2.0 + focal() * (CAM_HEIGHT / dist)
}

fn geo_tables(cfg: &FusionConfig) -> Vec<GeoScale> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(GEO_SEED);
    let half_fov = (crate::sensors::CAM_FOV_DEG / 2.0).to_radians();
    let mut out = Vec::new();
    for k in cfg.fused_stages() {
        let (ih, iw) = img_dims()[k];
        let (bh, bw) = bev_dims()[k];
        let c = cfg.channels[k];
        let cell = BEV_CELL * (BEV_N / bh) as f64;
        let (ufac, vfac) = (CAM_W / iw, CAM_H / ih);

        let mut i2b = Tensor::zeros(vec![bh * bw, ih * iw]);
        let mut i2b_rows = vec![false; bh * bw];
        for r in 0..bh {
            for col in 0..bw {
                let x1 = BEV_RANGE - r as f64 * cell;
                let y1 = BEV_HALF - col as f64 * cell;
                for _ in 0..GEO_POINTS {
                    let p = Vec2::new(x1 - rng.gen::<f64>() * cell, y1 - rng.gen::<f64>() * cell);
                    if p.x < 0.2 {
                        continue;
                    }
                    let az = p.y.atan2(p.x);
                    if az.abs() >= half_fov {
                        continue;
                    }
                    let (cu, cv) = (cam_u(az), cam_v(p.norm()));
                    if cu < 0.0 || cu >= CAM_W as f64 || cv < 0.0 || cv >= CAM_H as f64 {
                        continue;
                    }
                    let (us, vs) = (cu as usize / ufac, cv as usize / vfac);
                    i2b.data[(r * bw + col) * (ih * iw) + vs * iw + us] = 1.0;
                    i2b_rows[r * bw + col] = true;
                }
            }
        }

        let mut b2i = Tensor::zeros(vec![ih * iw, bh * bw]);
        let mut b2i_rows = vec![false; ih * iw];
        for v in 0..ih {
            for u in 0..iw {
                let cu = (u as f64 + 0.5) * ufac as f64;
                let cv = (v as f64 + 0.5) * vfac as f64;
                let phi = ((cv - CAM_H as f64 / 2.0) / focal()).atan();
                if phi <= 1e-6 {
                    continue;
                }
                let az = -((cu - CAM_W as f64 / 2.0) / focal()).atan();
                let dist = CAM_HEIGHT / phi.tan();
                let p = Vec2::new(dist * az.cos(), dist * az.sin());
                if p.x < 0.0 || p.x >= BEV_RANGE || p.y <= -BEV_HALF || p.y > BEV_HALF {
                    continue;
                }
                let br = ((BEV_RANGE - p.x) / cell) as usize;
                let bc = ((BEV_HALF - p.y) / cell) as usize;
                if br >= bh || bc >= bw {
                    continue;
                }
                b2i.data[(v * iw + u) * (bh * bw) + br * bw + bc] = 1.0;
                b2i_rows[v * iw + u] = true;
            }
        }

        let expand = |rows: &[bool]| {
            Tensor::new(
                vec![rows.len(), c],
                rows.iter().flat_map(|&r| std::iter::repeat(r as u8 as f32).take(c)).collect(),
            )
        };
        out.push(GeoScale { i2b_mask: expand(&i2b_rows), b2i_mask: expand(&b2i_rows), i2b, b2i });
    }
    out
}

// ── output extraction ──

#[derive(Debug, thiserror::Error)]
#[error("non-finite values in the {0} head")]
pub struct ModelFault(pub &'static str);

/// Runtime copies of every head, checked for NaN/inf in a fixed order so a
/// fault always names the first offending head.
pub struct ModelOutput {
    pub waypoints: Vec<Vec2>,
    pub depth: Tensor<f32>,
    pub semantics: Tensor<f32>,
    pub hdmap: Tensor<f32>,
    pub det_pos: Tensor<f32>,
    pub det_ori: Tensor<f32>,
    pub det_reg: Tensor<f32>,
    pub attention: Vec<Vec<Tensor<f32>>>,
}

pub fn extract<T: Scalar>(g: &Graph<T>, fo: &ForwardOut) -> Result<ModelOutput, ModelFault> {
    let take = |v: Var, name: &'static str| -> Result<Tensor<f32>, ModelFault> {
        let t = g.val(v);
        if t.data.iter().any(|&x| !Scalar::to_f64(x).is_finite()) {
            return Err(ModelFault(name));
        }
        Ok(Tensor::new(t.shape.clone(), t.data.iter().map(|&x| Scalar::to_f64(x) as f32).collect()))
    };
    let wp = take(fo.waypoints, "waypoints")?;
    let depth = take(fo.depth, "depth")?;
    let semantics = take(fo.semantics, "semantics")?;
    let hdmap = take(fo.hdmap, "road layout")?;
    let det_pos = take(fo.det_pos, "detection position")?;
    let det_ori = take(fo.det_ori, "detection orientation")?;
    let det_reg = take(fo.det_reg, "detection regression")?;
    let mut attention = Vec::new();
    for heads in &fo.attention {
        let mut hs = Vec::new();
        for &h in heads {
            hs.push(take(h, "attention")?);
        }
        attention.push(hs);
    }
    let n = wp.dims2().0;
    let waypoints = (0..n).map(|r| Vec2::new(wp.at2(r, 0) as f64, wp.at2(r, 1) as f64)).collect();
    Ok(ModelOutput { waypoints, depth, semantics, hdmap, det_pos, det_ori, det_reg, attention })
}
