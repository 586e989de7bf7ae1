//! Imitation training: AdamW over the full frame loss with per-sample
//! gradient accumulation, staged learning-rate drops, and a tripwire that
//! stops at the first non-finite number so the parameters on hand are
//! always the last finite ones.

use std::collections::HashMap;

use minigrad::{Graph, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_angle, frame_to_sample, Frame};
use crate::losses::{frame_loss, loss_log_values, FrameLabels, LossWeights, LOSS_LOG_HEADER};
use crate::model::net::{Model, Obs};
use crate::world::map::RoadMap;

/// Epochs whose checkpoints compete in closed-loop selection.
pub const EVAL_EPOCHS: [usize; 6] = [31, 33, 35, 37, 39, 41];

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// The rate is cut to a tenth after each of these epochs.
    pub lr_drops: (usize, usize),
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 41,
            batch: 8,
            lr: 1e-4,
            lr_drops: (30, 40),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr;
    if epoch > cfg.lr_drops.0 {
        lr *= 0.1;
    }
    if epoch > cfg.lr_drops.1 {
        lr *= 0.1;
    }
    lr
}

/// Deterministic per-epoch sample order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    idx
}

#[derive(Debug, thiserror::Error)]
#[error("training aborted at step {step}: {reason}")]
pub struct TrainAbort {
    pub step: usize,
    pub reason: String,
}

// ── optimizer ──

/// Adam with decoupled weight decay. All arithmetic is 64-bit regardless of
/// how the parameters are stored.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            // Decay acts on the parameter directly, not through the moments.
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

// ── trainer ──

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub step: usize,
    /// TSV loss log, one line per optimizer step (batch means).
    pub log: String,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    pub final_total: f64,
    pub aborted: Option<String>,
}

fn flat_params(model: &Model) -> Vec<f64> {
    let mut flat = Vec::with_capacity(model.param_count());
    for t in model.params.tensors() {
        flat.extend(t.data.iter().map(|&x| x as f64));
    }
    flat
}

fn write_params(model: &mut Model, flat: &[f64]) {
    let mut off = 0;
    for t in model.params.tensors_mut() {
        for x in &mut t.data {
            *x = flat[off] as f32;
            off += 1;
        }
    }
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Trainer {
        let opt = AdamW::new(model.param_count(), &cfg);
        Trainer { model, opt, cfg, step: 0, log: format!("{LOSS_LOG_HEADER}\n") }
    }

    /// One optimizer step on a batch. Gradients are accumulated one sample
    /// at a time in a fixed order; the update is applied only if the loss,
    /// the gradients, and the resulting parameters are all finite.
    fn batch_step(&mut self, samples: &[(Obs, FrameLabels)], lr: f64) -> Result<[f64; 6], TrainAbort> {
        let abort = |step: usize, reason: String| TrainAbort { step, reason };
        let n = self.model.param_count();
        let mut gsum = vec![0.0f64; n];
        let mut vals = [0.0f64; 6];
        for (obs, labels) in samples {
            let mut g = Graph::<f32>::new();
            let bound = self.model.bind(&mut g);
            let fo = self.model.forward(&mut g, &bound, obs);
            let (total, terms) = frame_loss(&mut g, &fo, labels, &self.cfg.weights)
                .map_err(|e| abort(self.step, e.to_string()))?;
            let sv = |v| Scalar::to_f64(g.val(v).data[0]);
            let sample = [
                sv(terms.waypoint),
                sv(terms.depth),
                sv(terms.semantics),
                sv(terms.hdmap),
                sv(terms.detection),
                sv(total),
            ];
            if !sample[5].is_finite() {
                return Err(abort(self.step, "non-finite loss".into()));
            }
            for (a, s) in vals.iter_mut().zip(sample) {
                *a += s;
            }
            g.backward(total);
            let mut off = 0;
            for &v in &bound.vars {
                let numel = g.val(v).numel();
                if let Some(gr) = g.grad(v) {
                    for (slot, &x) in gsum[off..off + numel].iter_mut().zip(gr) {
                        *slot += x as f64;
                    }
                }
                off += numel;
            }
        }
        let b = samples.len() as f64;
        for x in &mut gsum {
            *x /= b;
        }
        for v in &mut vals {
            *v /= b;
        }
        if gsum.iter().any(|x| !x.is_finite()) {
            return Err(abort(self.step, "non-finite gradient".into()));
        }
        let mut flat = flat_params(&self.model);
        self.opt.step(lr, &mut flat, &gsum);
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(abort(self.step, "non-finite parameter after update".into()));
        }
        write_params(&mut self.model, &flat);
        self.step += 1;
        self.log.push_str(&loss_log_values(self.step, &vals));
        self.log.push('\n');
        Ok(vals)
    }

    /// Run one 1-based epoch; returns the mean total loss across its steps.
    pub fn epoch(
        &mut self,
        frames: &[Frame],
        maps: &HashMap<u32, RoadMap>,
        epoch: usize,
    ) -> Result<f64, TrainAbort> {
        let lr = lr_at(&self.cfg, epoch);
        let order = epoch_order(frames.len(), self.cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch) {
            let samples: Vec<(Obs, FrameLabels)> = chunk
                .iter()
                .map(|&i| {
                    let f = &frames[i];
                    let angle = if self.cfg.augment {
                        augment_angle(self.cfg.seed, epoch, i)
                    } else {
                        0.0
                    };
                    frame_to_sample(f, &maps[&f.snap.map_id], angle)
                })
                .collect();
            total += self.batch_step(&samples, lr)?[5];
            steps += 1;
        }
        Ok(total / steps.max(1) as f64)
    }

    pub fn train(&mut self, frames: &[Frame], maps: &HashMap<u32, RoadMap>) -> TrainReport {
        let mut last = f64::NAN;
        for e in 1..=self.cfg.epochs {
            match self.epoch(frames, maps, e) {
                Ok(mean) => last = mean,
                Err(a) => {
                    return TrainReport {
                        steps: self.step,
                        epochs_run: e - 1,
                        final_total: last,
                        aborted: Some(a.to_string()),
                    }
                }
            }
        }
        TrainReport { steps: self.step, epochs_run: self.cfg.epochs, final_total: last, aborted: None }
    }
}

// ── evaluation helpers ──

pub fn map_cache(frames: &[Frame]) -> HashMap<u32, RoadMap> {
    let mut maps = HashMap::new();
    for f in frames {
        maps.entry(f.snap.map_id).or_insert_with(|| RoadMap::build(f.snap.map_id));
    }
    maps
}

/// (train, held-out) index split: every `every`-th frame is held out.
pub fn split_holdout(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % every != 0)
}

/// Mean waypoint offset loss over un-augmented frames, inference path.
pub fn waypoint_eval(model: &Model, frames: &[Frame], maps: &HashMap<u32, RoadMap>) -> f64 {
    let mut sum = 0.0;
    for f in frames {
        let (obs, labels) = frame_to_sample(f, &maps[&f.snap.map_id], 0.0);
        let out = model.infer(&obs).expect("inference stays finite");
        sum += out
            .waypoints
            .iter()
            .zip(&labels.waypoints)
            .map(|(p, t)| (p.x - t.x).abs() + (p.y - t.y).abs())
            .sum::<f64>();
    }
    sum / frames.len().max(1) as f64
}

/// Best epoch by score; ties go to the earliest epoch.
pub fn select_checkpoint(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(e, s) in scores {
        let better = match best {
            None => true,
            Some((be, bs)) => s > bs || (s == bs && e < be),
        };
        if better {
            best = Some((e, s));
        }
    }
    best.map(|(e, _)| e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::RouteSpec;
    use crate::data::collect_route;
    use crate::model::config::FusionConfig;
    use crate::world::route::{longest_routes, Condition};
    use crate::world::scenario::SpawnConfig;

    pub(super) fn toy_frames(n: usize) -> Vec<Frame> {
        let map = RoadMap::build(0);
        let seq = longest_routes(&map, 1).remove(0);
        let spec = RouteSpec {
            map_id: 0,
            start: *seq.first().unwrap(),
            goal: *seq.last().unwrap(),
            condition: Condition { weather: 0, daylight: 0 },
            scenarios: Vec::new(),
        };
        let spawn = SpawnConfig { vehicles: 0, pedestrians: 0, seed: 5 };
        let (frames, _) = collect_route(&spec, 0, &spawn);
        assert!(frames.len() >= n, "route too short for {n} frames");
        frames.into_iter().take(n).collect()
    }

    pub(super) fn tiny_model(seed: u64) -> Model {
        let cfg = FusionConfig {
            channels: [4, 8, 16, 32],
            layers_per_scale: 1,
            scales_fused: 2,
            ..FusionConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn adamw_matches_a_scalar_reference() {
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(3, &cfg);
        let mut p = [0.5, -1.2, 2.0];
        let grads = [[0.1, -0.3, 0.02], [0.0, 0.2, -0.5], [1.0, 1.0, 1.0]];

        let (b1, b2, eps, wd, lr) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, 3e-3);
        let mut rp = p;
        let (mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3]);
        for (t, gs) in grads.iter().enumerate() {
            opt.step(lr, &mut p, gs);
            for i in 0..3 {
                rm[i] = b1 * rm[i] + (1.0 - b1) * gs[i];
                rv[i] = b2 * rv[i] + (1.0 - b2) * gs[i] * gs[i];
                let mh = rm[i] / (1.0 - b1.powi(t as i32 + 1));
                let vh = rv[i] / (1.0 - b2.powi(t as i32 + 1));
                rp[i] -= lr * (mh / (vh.sqrt() + eps) + wd * rp[i]);
            }
            for i in 0..3 {
                assert!((p[i] - rp[i]).abs() < 1e-12, "t={t} i={i}: {} vs {}", p[i], rp[i]);
            }
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moments() {
        // Zero gradients leave the moments at zero, so the update must be a
        // pure multiplicative shrink; coupled L2 would leave p untouched.
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [2.0];
        opt.step(0.01, &mut p, &[0.0]);
        assert_eq!(p[0], 2.0 - 0.01 * 0.1 * 2.0);
        opt.step(0.01, &mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.001) * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_drops_a_decade_after_each_milestone() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 1), 1e-4);
        assert_eq!(lr_at(&cfg, 30), 1e-4);
        assert!((lr_at(&cfg, 31) - 1e-5).abs() < 1e-20);
        assert!((lr_at(&cfg, 40) - 1e-5).abs() < 1e-20);
        assert!((lr_at(&cfg, 41) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(100, 7, 1);
        assert_eq!(a, epoch_order(100, 7, 1));
        assert_ne!(a, epoch_order(100, 7, 2));
        assert_ne!(a, epoch_order(100, 8, 1));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn select_checkpoint_breaks_ties_toward_the_earliest_epoch() {
        assert_eq!(select_checkpoint(&[]), None);
        assert_eq!(select_checkpoint(&[(31, 0.5), (33, 0.7), (35, 0.7)]), Some(33));
        assert_eq!(select_checkpoint(&[(35, 0.7), (31, 0.7)]), Some(31));
    }

    #[test]
    fn holdout_split_partitions_the_indices() {
        let (train, held) = split_holdout(25, 10);
        assert_eq!(held, vec![0, 10, 20]);
        assert_eq!(train.len(), 22);
        assert!(train.iter().all(|i| !held.contains(i)));
    }

    #[test]
    fn two_identical_runs_produce_identical_logs_and_weights() {
        let frames = toy_frames(8);
        let maps = map_cache(&frames);
        let cfg = TrainConfig { epochs: 2, batch: 4, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut tr = Trainer::new(tiny_model(1), cfg.clone());
            let report = tr.train(&frames, &maps);
            assert!(report.aborted.is_none());
            (tr.log.clone(), flat_params(&tr.model))
        };
        let (log_a, p_a) = run();
        let (log_b, p_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(p_a, p_b);
        assert_eq!(log_a.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn exploding_rates_abort_and_keep_finite_weights() {
        let frames = toy_frames(4);
        let maps = map_cache(&frames);
        let cfg = TrainConfig {
            epochs: 5,
            batch: 4,
            lr: 1e12,
            lr_drops: (1000, 2000),
            augment: false,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(tiny_model(2), cfg);
        let report = tr.train(&frames, &maps);
        assert!(report.aborted.is_some(), "survived lr=1e12: {report:?}");
        assert!(flat_params(&tr.model).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn overfitting_a_handful_of_frames_drives_waypoint_loss_down() {
        let frames = toy_frames(32);
        let maps = map_cache(&frames);
        let weights = LossWeights {
            waypoint: 1.0,
            depth: 0.0,
            semantics: 0.0,
            hdmap: 0.0,
            detection: 0.0,
        };
        let cfg = TrainConfig {
            epochs: 62,
            batch: 4,
            lr: 1e-2,
            lr_drops: (40, 55),
            augment: false,
            weights,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(tiny_model(3), cfg);
        let before = waypoint_eval(&tr.model, &frames, &maps);
        let report = tr.train(&frames, &maps);
        assert!(report.aborted.is_none(), "{report:?}");
        assert_eq!(report.steps, 496);
        let after = waypoint_eval(&tr.model, &frames, &maps);
        let tail: Vec<&str> = tr.log.lines().rev().take(3).collect();
        assert!(after < 0.05, "waypoint loss {before:.3} -> {after:.3}; tail {tail:?}");
    }
}
