//! Planar geometry: vectors, poses, oriented boxes, arc-length polylines.
//!
//! Conventions used everywhere downstream: x forward / y left in body frames,
//! yaw counter-clockwise from +x, angles normalized to [-pi, pi).

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

// ── vectors ──

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Vec2 {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// CCW perpendicular: (x, y) -> (-y, x).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, a: f64) -> Vec2 {
        let (s, c) = a.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Unit vector, or zero when the input is degenerate.
    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n < 1e-12 {
            Vec2::ZERO
        } else {
            self * (1.0 / n)
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

// ── angles ──

/// Normalize to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

// ── poses ──

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub pos: Vec2,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Pose {
        Pose { pos: Vec2::new(x, y), yaw: wrap_angle(yaw) }
    }

    pub fn forward(self) -> Vec2 {
        Vec2::new(self.yaw.cos(), self.yaw.sin())
    }

    /// World point into this body frame (x forward, y left).
    pub fn to_local(self, p: Vec2) -> Vec2 {
        (p - self.pos).rotate(-self.yaw)
    }

    /// Body-frame point into the world frame.
    pub fn to_world(self, p: Vec2) -> Vec2 {
        self.pos + p.rotate(self.yaw)
    }
}

// ── oriented boxes ──

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vec2,
    pub half: Vec2,
    pub yaw: f64,
}

impl Obb {
    pub fn new(center: Vec2, half: Vec2, yaw: f64) -> Obb {
        Obb { center, half, yaw }
    }

    pub fn axis_aligned(center: Vec2, half: Vec2) -> Obb {
        Obb { center, half, yaw: 0.0 }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        let f = Vec2::new(self.yaw.cos(), self.yaw.sin());
        [f, f.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [ax, ay] = self.axes();
        let ex = ax * self.half.x;
        let ey = ay * self.half.y;
        [
            self.center + ex + ey,
            self.center + ex - ey,
            self.center - ex - ey,
            self.center - ex + ey,
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = (p - self.center).rotate(-self.yaw);
        l.x.abs() <= self.half.x && l.y.abs() <= self.half.y
    }

    /// Separating-axis test over the four face normals of the two boxes.
    pub fn intersects(&self, other: &Obb) -> bool {
        let axes = [self.axes(), other.axes()];
        for axis in axes.iter().flatten() {
            let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in self.corners() {
                let p = c.dot(*axis);
                amin = amin.min(p);
                amax = amax.max(p);
            }
            let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in other.corners() {
                let p = c.dot(*axis);
                bmin = bmin.min(p);
                bmax = bmax.max(p);
            }
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }

    /// Leading half of the box: same width, half the length, shifted forward.
    pub fn front_half(&self) -> Obb {
        let f = Vec2::new(self.yaw.cos(), self.yaw.sin());
        Obb {
            center: self.center + f * (self.half.x * 0.5),
            half: Vec2::new(self.half.x * 0.5, self.half.y),
            yaw: self.yaw,
        }
    }

    /// Circle overlap via the closest point in the box.
    pub fn intersects_circle(&self, c: Vec2, r: f64) -> bool {
        let l = (c - self.center).rotate(-self.yaw);
        let dx = (l.x.abs() - self.half.x).max(0.0);
        let dy = (l.y.abs() - self.half.y).max(0.0);
        dx * dx + dy * dy <= r * r
    }
}

// ── polylines ──

/// Point chain with precomputed cumulative arc length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Polyline {
    pub pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<Vec2>) -> Polyline {
        assert!(pts.len() >= 2, "polyline needs at least two points");
        let mut cum = Vec::with_capacity(pts.len());
        let mut s = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            s += w[0].dist(w[1]);
            cum.push(s);
        }
        Polyline { pts, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        // cum is sorted; partition_point finds the first vertex past s.
        let i = self.cum.partition_point(|&c| c <= s).min(self.cum.len() - 1);
        let i = i.max(1);
        let seg_len = self.cum[i] - self.cum[i - 1];
        let t = if seg_len < 1e-12 { 0.0 } else { (s - self.cum[i - 1]) / seg_len };
        (i - 1, t)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        self.pts[i] + (self.pts[i + 1] - self.pts[i]) * t
    }

    pub fn direction_at(&self, s: f64) -> Vec2 {
        let (i, _) = self.segment_at(s);
        (self.pts[i + 1] - self.pts[i]).normalized()
    }

    /// Closest point on the chain: returns (arc length, distance).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        self.project_span(p, 0, self.pts.len() - 1)
    }

    /// Like `project`, but restricted to the arc window [s-back, s+fwd].
    /// Keeps progress monotone on self-crossing chains.
    pub fn project_near(&self, p: Vec2, s: f64, back: f64, fwd: f64) -> (f64, f64) {
        let lo = self.segment_at((s - back).max(0.0)).0;
        let hi = (self.segment_at((s + fwd).min(self.length())).0 + 1).min(self.pts.len() - 1);
        self.project_span(p, lo, hi)
    }

    fn project_span(&self, p: Vec2, seg_lo: usize, seg_hi: usize) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for i in seg_lo..seg_hi {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = b - a;
            let len_sq = ab.norm_sq();
            let t = if len_sq < 1e-24 { 0.0 } else { ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0) };
            let q = a + ab * t;
            let d = p.dist(q);
            if d < best.1 {
                best = (self.cum[i] + ab.norm() * t, d);
            }
        }
        best
    }
}
