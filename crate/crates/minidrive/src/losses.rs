//! Training objectives: waypoint L1, dense auxiliary terms, and the
//! penalty-reduced focal detection loss with its target renderer.

use minigrad::{Graph, Scalar, Tensor, Var};

use crate::detection::{cell_of, encode, DetBox, DetTargets, REG_CH, YAW_BINS};
use crate::geom::Vec2;
use crate::model::net::ForwardOut;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
const PROB_FLOOR: f64 = 1e-6;

/// Ground truth for one training frame, everything in the ego frame.
/// Depth is normalized by the camera's 48 m range, matching the sensor
/// output and the sigmoid head.
#[derive(Clone)]
pub struct FrameLabels {
    pub waypoints: Vec<Vec2>,
    pub depth: Vec<f64>,
    pub semantics: Vec<u8>,
    pub hdmap: Vec<u8>,
    pub boxes: Vec<DetBox>,
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("waypoint count mismatch: predicted {pred}, labeled {gt}")]
    WaypointLen { pred: usize, gt: usize },
    #[error("class id {id} out of range (classes {n})")]
    BadClass { id: usize, n: usize },
    #[error("position map value {v} outside [0, 1]")]
    BadProb { v: f64 },
}

/// Eq.-style waypoint objective: sum over steps of the L1 norm of the
/// prediction error.
pub fn waypoint_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: &[Vec2],
) -> Result<Var, LossError> {
    let (n, _) = g.val(pred).dims2();
    if n != gt.len() {
        return Err(LossError::WaypointLen { pred: n, gt: gt.len() });
    }
    let mut data = Vec::with_capacity(2 * n);
    for w in gt {
        data.push(T::from_f64(w.x));
        data.push(T::from_f64(w.y));
    }
    let target = g.input(Tensor::new(vec![n, 2], data));
    let d = g.sub(pred, target);
    let d = g.abs(d);
    Ok(g.sum_all(d))
}

/// Center-point targets for a frame, plus how many boxes fell outside the
/// grid and were dropped.
pub fn render_detection_targets(boxes: &[DetBox]) -> (DetTargets, usize) {
    let dropped = boxes.iter().filter(|b| cell_of(b.center).is_none()).count();
    (encode(boxes), dropped)
}

/// Penalty-reduced focal loss on the position map plus cross-entropy
/// orientation and L1 regression at center cells, each normalized by
/// max(1, centers). The grid side is taken from the position map, so toy
/// grids exercise the same code.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    det_pos: Var,
    det_ori: Var,
    det_reg: Var,
    t: &DetTargets,
) -> Result<Var, LossError> {
    let (n, _, _) = g.val(det_pos).dims3();
    let cells = n * n;
    assert_eq!(t.heat.len(), cells, "target grid mismatch");
    for &v in &g.val(det_pos).data {
        let v = Scalar::to_f64(v);
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::BadProb { v });
        }
    }

    let npos = t.mask.iter().filter(|&&m| m).count();
    let pos_mask = g.input(Tensor::new(
        vec![n, n, 1],
        t.mask.iter().map(|&m| T::from_f64(m as u8 as f64)).collect(),
    ));
    // (1 - y)^beta vanishes at the unit peaks, so it doubles as the
    // negative-cell mask.
    let neg_w = g.input(Tensor::new(
        vec![n, n, 1],
        t.heat.iter().map(|&y| T::from_f64((1.0 - y).powf(FOCAL_BETA))).collect(),
    ));
    let p = g.clamp(det_pos, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let omp = g.affine(p, -1.0, 1.0);
    let ln_p = g.ln(p);
    let ln_omp = g.ln(omp);
    let omp2 = g.mul(omp, omp);
    let pos_term = g.mul(omp2, ln_p);
    let pos_term = g.mul(pos_term, pos_mask);
    let p2 = g.mul(p, p);
    let neg_term = g.mul(p2, ln_omp);
    let neg_term = g.mul(neg_term, neg_w);
    let pos_sum = g.sum_all(pos_term);
    let neg_sum = g.sum_all(neg_term);
    let s = g.add(pos_sum, neg_sum);
    let focal = g.scale(s, -1.0 / npos.max(1) as f64);

    if npos == 0 {
        return Ok(focal);
    }
    let idxs: Vec<usize> = t.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let bins: Vec<usize> = idxs.iter().map(|&i| t.bin[i] as usize).collect();
    let ori_rows = g.gather_rows(det_ori, idxs.clone());
    let ori_probs = g.softmax(ori_rows);
    let ce = g.nll_rows(ori_probs, bins);

    let reg_flat = g.reshape(det_reg, vec![cells, REG_CH]);
    let reg_rows = g.gather_rows(reg_flat, idxs.clone());
    let mut gt = Vec::with_capacity(idxs.len() * REG_CH);
    for &i in &idxs {
        gt.extend(t.reg[i * REG_CH..(i + 1) * REG_CH].iter().map(|&v| T::from_f64(v)));
    }
    let gt = g.input(Tensor::new(vec![idxs.len(), REG_CH], gt));
    let d = g.sub(reg_rows, gt);
    let d = g.abs(d);
    let l1 = g.sum_all(d);
    let l1 = g.scale(l1, 1.0 / npos as f64);

    let s = g.add(ce, l1);
    Ok(g.add(focal, s))
}

/// Mean absolute depth error over pixels; both sides in normalized units.
pub fn depth_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64]) -> Var {
    let shape = g.val(pred).shape.clone();
    assert_eq!(g.val(pred).numel(), gt.len(), "depth label size mismatch");
    let target = g.input(Tensor::new(shape, gt.iter().map(|&v| T::from_f64(v)).collect()));
    let d = g.sub(pred, target);
    let d = g.abs(d);
    let s = g.sum_all(d);
    g.scale(s, 1.0 / gt.len() as f64)
}

/// Mean cross-entropy of probability rows against per-pixel class ids.
pub fn class_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, ids: &[u8]) -> Result<Var, LossError> {
    let (n, classes) = g.val(probs).dims2();
    assert_eq!(n, ids.len(), "class label count mismatch");
    for &id in ids {
        if id as usize >= classes {
            return Err(LossError::BadClass { id: id as usize, n: classes });
        }
    }
    Ok(g.nll_rows(probs, ids.iter().map(|&i| i as usize).collect()))
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub waypoint: f64,
    pub depth: f64,
    pub semantics: f64,
    pub hdmap: f64,
    pub detection: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { waypoint: 1.0, depth: 10.0, semantics: 1.0, hdmap: 1.0, detection: 1.0 }
    }
}

/// Handles to each term of one frame's objective, for the per-step log.
#[derive(Clone, Copy)]
pub struct LossTerms {
    pub waypoint: Var,
    pub depth: Var,
    pub semantics: Var,
    pub hdmap: Var,
    pub detection: Var,
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, t: &LossTerms, w: &LossWeights) -> Var {
    let mut acc = g.scale(t.waypoint, w.waypoint);
    for (v, wt) in [
        (t.depth, w.depth),
        (t.semantics, w.semantics),
        (t.hdmap, w.hdmap),
        (t.detection, w.detection),
    ] {
        let s = g.scale(v, wt);
        acc = g.add(acc, s);
    }
    acc
}

/// Every objective for one frame: the weighted total plus the raw terms.
pub fn frame_loss<T: Scalar>(
    g: &mut Graph<T>,
    fo: &ForwardOut,
    labels: &FrameLabels,
    w: &LossWeights,
) -> Result<(Var, LossTerms), LossError> {
    let (targets, _) = render_detection_targets(&labels.boxes);
    let terms = LossTerms {
        waypoint: waypoint_loss(g, fo.waypoints, &labels.waypoints)?,
        depth: depth_loss(g, fo.depth, &labels.depth),
        semantics: class_loss(g, fo.semantics, &labels.semantics)?,
        hdmap: class_loss(g, fo.hdmap, &labels.hdmap)?,
        detection: detection_loss(g, fo.det_pos, fo.det_ori, fo.det_reg, &targets)?,
    };
    Ok((total_loss(g, &terms, w), terms))
}

pub const LOSS_LOG_HEADER: &str = "step\twaypoint\tdepth\tsemantics\thdmap\tdetection\ttotal";

/// `vals` in header order: waypoint, depth, semantics, hdmap, detection, total.
pub fn loss_log_values(step: usize, vals: &[f64; 6]) -> String {
    format!(
        "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]
    )
}

pub fn loss_log_line<T: Scalar>(g: &Graph<T>, step: usize, t: &LossTerms, total: Var) -> String {
    let v = |x: Var| Scalar::to_f64(g.val(x).data[0]);
    loss_log_values(
        step,
        &[v(t.waypoint), v(t.depth), v(t.semantics), v(t.hdmap), v(t.detection), v(total)],
    )
}
