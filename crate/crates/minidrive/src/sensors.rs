//! Sensor simulation from world snapshots: a 64x16 RGB camera built from
//! horizontal raycasts with synthesized vertical structure, a 64x64
//! two-height-bin occupancy grid with a goal channel, and the dense label
//! grids the auxiliary tasks train against. Rendering is a pure function of
//! (snapshot, map, condition), which is what makes re-rendering under pose
//! augmentation exact.

use crate::detection::{self, DetBox, DetTargets};
use crate::geom::{Obb, Vec2};
use crate::world::map::{GroundClass, RoadMap};
use crate::world::route::Condition;
use crate::world::state::{AgentKind, WorldSnapshot};
use minigrad::Tensor;

pub const CAM_W: usize = 64;
pub const CAM_H: usize = 16;
pub const CAM_FOV_DEG: f64 = 132.0;
pub const CAM_HEIGHT: f64 = 1.2;
pub const MAX_DEPTH: f64 = 48.0;

pub const BEV_N: usize = 64;
pub const BEV_CELL: f64 = 0.25;
pub const BEV_RANGE: f64 = 16.0;
pub const BEV_HALF: f64 = 8.0;

pub const HDMAP_N: usize = 32;
pub const HDMAP_CELL: f64 = 0.5;
pub const HDMAP_CLASSES: usize = 3;

pub const SEM_UNLABELED: u8 = 0;
pub const SEM_VEHICLE: u8 = 1;
pub const SEM_ROAD: u8 = 2;
pub const SEM_RED_LIGHT: u8 = 3;
pub const SEM_PEDESTRIAN: u8 = 4;
pub const SEM_LANE_MARK: u8 = 5;
pub const SEM_SIDEWALK: u8 = 6;
pub const SEM_CLASSES: usize = 7;

/// Horizontal focal length in pixels; vertical rows share it (square pixels).
pub fn focal() -> f64 {
    (CAM_W as f64 / 2.0) / (CAM_FOV_DEG.to_radians() / 2.0).tan()
}

// ── raycast primitives ──

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box(Obb),
    Circle(Vec2, f64),
}

#[derive(Clone, Copy, Debug)]
struct Obstacle {
    shape: Shape,
    class: u8,
    height: f64,
    color: [f64; 3],
}

fn ray_segment(o: Vec2, d: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    // Solve o + t*d = a + u*(b - a).
    let ab = b - a;
    let det = ab.x * d.y - d.x * ab.y;
    if det.abs() < 1e-12 {
        return None;
    }
    let rx = a.x - o.x;
    let ry = a.y - o.y;
    let t = (ab.x * ry - ab.y * rx) / det;
    let u = (d.x * ry - d.y * rx) / det;
    if t > 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

fn ray_box(o: Vec2, d: Vec2, b: &Obb) -> Option<f64> {
    let c = b.corners();
    let mut best: Option<f64> = None;
    for i in 0..4 {
        if let Some(t) = ray_segment(o, d, c[i], c[(i + 1) % 4]) {
            best = Some(best.map_or(t, |x: f64| x.min(t)));
        }
    }
    best
}

fn ray_circle(o: Vec2, d: Vec2, c: Vec2, r: f64) -> Option<f64> {
    let oc = c - o;
    let proj = oc.dot(d);
    let d2 = oc.norm_sq() - proj * proj;
    if d2 > r * r {
        return None;
    }
    let half = (r * r - d2).sqrt();
    let t = proj - half;
    if t > 0.0 {
        Some(t)
    } else if proj + half > 0.0 {
        Some(proj + half)
    } else {
        None
    }
}

fn ray_obstacle(o: Vec2, d: Vec2, ob: &Obstacle) -> Option<f64> {
    match ob.shape {
        Shape::Box(b) => ray_box(o, d, &b),
        Shape::Circle(c, r) => ray_circle(o, d, c, r),
    }
}

// ── appearance ──

const CAR_COLORS: [[f64; 3]; 5] = [
    [0.70, 0.16, 0.14],
    [0.16, 0.26, 0.58],
    [0.78, 0.78, 0.80],
    [0.16, 0.16, 0.18],
    [0.58, 0.52, 0.20],
];
const COLOR_BUILDING: [f64; 3] = [0.48, 0.42, 0.38];
const COLOR_PED: [f64; 3] = [0.85, 0.60, 0.40];
const COLOR_ROAD: [f64; 3] = [0.30, 0.30, 0.32];
const COLOR_MARK: [f64; 3] = [0.80, 0.80, 0.75];
const COLOR_SIDEWALK: [f64; 3] = [0.55, 0.52, 0.50];
const COLOR_OPEN: [f64; 3] = [0.34, 0.42, 0.30];
const COLOR_SKY: [f64; 3] = [0.55, 0.66, 0.86];
const COLOR_RED_LIGHT: [f64; 3] = [0.90, 0.15, 0.10];
const COLOR_GREEN_LIGHT: [f64; 3] = [0.10, 0.80, 0.25];
const COLOR_HAZE: [f64; 3] = [0.72, 0.74, 0.78];

fn shade(base: [f64; 3], depth_m: f64, cond: Condition) -> [f32; 3] {
    let brightness = 0.45 + 0.1 * cond.daylight as f64;
    let haze_len = 60.0 - 8.0 * cond.weather as f64;
    let fz = 1.0 - (-depth_m / haze_len).exp();
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let v = (base[k] * (1.0 - fz) + COLOR_HAZE[k] * fz) * brightness;
        out[k] = v.clamp(0.0, 1.0) as f32;
    }
    out
}

fn collect_obstacles(snap: &WorldSnapshot, map: &RoadMap) -> Vec<Obstacle> {
    let mut out = Vec::new();
    for (i, a) in snap.agents.iter().enumerate().skip(1) {
        match a.kind {
            AgentKind::Vehicle => out.push(Obstacle {
                shape: Shape::Box(Obb::new(a.pose.pos, a.half, a.pose.yaw)),
                class: SEM_VEHICLE,
                height: crate::world::state::VEHICLE_HEIGHT,
                color: CAR_COLORS[i % CAR_COLORS.len()],
            }),
            AgentKind::Pedestrian => out.push(Obstacle {
                shape: Shape::Circle(a.pose.pos, crate::world::state::PED_RADIUS),
                class: SEM_PEDESTRIAN,
                height: crate::world::state::PED_HEIGHT,
                color: COLOR_PED,
            }),
        }
    }
    for b in &map.buildings {
        out.push(Obstacle {
            shape: Shape::Box(b.rect),
            class: SEM_UNLABELED,
            height: b.height,
            color: COLOR_BUILDING,
        });
    }
    for l in &map.lights {
        let red = map.light_is_red(l, snap.t);
        out.push(Obstacle {
            shape: Shape::Circle(l.fixture, 0.25),
            class: if red { SEM_RED_LIGHT } else { SEM_UNLABELED },
            height: 4.0,
            color: if red { COLOR_RED_LIGHT } else { COLOR_GREEN_LIGHT },
        });
    }
    out
}

fn ground_sem(c: GroundClass) -> (u8, [f64; 3]) {
    match c {
        GroundClass::Road => (SEM_ROAD, COLOR_ROAD),
        GroundClass::LaneMarking => (SEM_LANE_MARK, COLOR_MARK),
        GroundClass::Sidewalk => (SEM_SIDEWALK, COLOR_SIDEWALK),
        GroundClass::Open => (SEM_UNLABELED, COLOR_OPEN),
    }
}

// ── camera ──

#[derive(Clone, Debug)]
pub struct CameraFrame {
    /// [CAM_H, CAM_W, 3] in [0,1].
    pub rgb: Tensor<f32>,
    /// Forward z-depth normalized by MAX_DEPTH, row-major [CAM_H * CAM_W].
    pub depth: Vec<f64>,
    pub sem: Vec<u8>,
}

pub fn render_camera(snap: &WorldSnapshot, map: &RoadMap, cond: Condition) -> CameraFrame {
    let ego = snap.agents[0].pose;
    let obstacles = collect_obstacles(snap, map);
    let f = focal();
    let mut rgb = vec![0.0f32; CAM_H * CAM_W * 3];
    let mut depth = vec![1.0f64; CAM_H * CAM_W];
    let mut sem = vec![SEM_UNLABELED; CAM_H * CAM_W];

    for u in 0..CAM_W {
        let az = -(((u as f64 + 0.5) - CAM_W as f64 / 2.0) / f).atan();
        let cos_az = az.cos();
        let dir = Vec2::new((ego.yaw + az).cos(), (ego.yaw + az).sin());
        let mut hits: Vec<(f64, &Obstacle)> = obstacles
            .iter()
            .filter_map(|ob| {
                ray_obstacle(ego.pos, dir, ob)
                    .filter(|&t| t > 0.3 && t < MAX_DEPTH)
                    .map(|t| (t, ob))
            })
            .collect();
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        for v in 0..CAM_H {
            let phi = (((v as f64 + 0.5) - CAM_H as f64 / 2.0) / f).atan();
            let mut found: Option<(f64, u8, [f64; 3])> = None;
            for (t, ob) in &hits {
                let phi_top = (CAM_HEIGHT - ob.height).atan2(*t);
                let phi_bot = CAM_HEIGHT.atan2(*t);
                if phi >= phi_top && phi <= phi_bot {
                    found = Some((*t, ob.class, ob.color));
                    break;
                }
            }
            let (depth_m, class, color) = match found {
                Some((t, class, color)) => (t * cos_az, class, color),
                None if phi > 1e-9 => {
                    let g = CAM_HEIGHT / phi.tan();
                    if g <= MAX_DEPTH {
                        let p = ego.pos + dir * g;
                        let (class, color) = ground_sem(map.ground_class(p));
                        (g * cos_az, class, color)
                    } else {
                        (MAX_DEPTH, SEM_UNLABELED, COLOR_OPEN)
                    }
                }
                None => (MAX_DEPTH, SEM_UNLABELED, COLOR_SKY),
            };
            let px = shade(color, depth_m, cond);
            let idx = v * CAM_W + u;
            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&px);
            depth[idx] = (depth_m / MAX_DEPTH).clamp(0.0, 1.0);
            sem[idx] = class;
        }
    }
    CameraFrame { rgb: Tensor::new(vec![CAM_H, CAM_W, 3], rgb), depth, sem }
}

// ── birds-eye occupancy ──

/// Ego-frame point -> (row, col) on the 64x64 quarter-meter grid.
/// Row 0 is 16 m ahead, col 0 is 8 m to the left.
pub fn bev_cell(p: Vec2) -> Option<(usize, usize)> {
    if p.x < 0.0 || p.x >= BEV_RANGE || p.y <= -BEV_HALF || p.y > BEV_HALF {
        return None;
    }
    let row = ((BEV_RANGE - p.x) / BEV_CELL).floor() as usize;
    let col = ((BEV_HALF - p.y) / BEV_CELL).floor() as usize;
    Some((row.min(BEV_N - 1), col.min(BEV_N - 1)))
}

pub fn bev_cell_center(row: usize, col: usize) -> Vec2 {
    Vec2::new(
        BEV_RANGE - (row as f64 + 0.5) * BEV_CELL,
        BEV_HALF - (col as f64 + 0.5) * BEV_CELL,
    )
}

/// Goal pulled into the grid by component clamp, direction kept when ahead.
pub fn clamp_goal(goal_local: Vec2) -> Vec2 {
    Vec2::new(
        goal_local.x.clamp(0.0, BEV_RANGE - BEV_CELL),
        goal_local.y.clamp(-(BEV_HALF - BEV_CELL), BEV_HALF - BEV_CELL),
    )
}

/// Channels: 0 = ground surface mask, 1 = above-ground occupancy counts,
/// 2 = goal splat (1 at the goal cell, 0.5 at 4-neighbors).
pub fn rasterize_bev(snap: &WorldSnapshot, map: &RoadMap, goal_world: Vec2) -> Tensor<f32> {
    let ego = snap.agents[0].pose;
    let mut data = vec![0.0f32; BEV_N * BEV_N * 3];
    for row in 0..BEV_N {
        for col in 0..BEV_N {
            let local = bev_cell_center(row, col);
            let world = ego.to_world(local);
            let idx = (row * BEV_N + col) * 3;
            if !matches!(map.ground_class(world), GroundClass::Open) {
                data[idx] = 1.0;
            }
            let mut count = 0.0f32;
            for a in snap.agents.iter().skip(1) {
                let covered = match a.kind {
                    AgentKind::Vehicle => Obb::new(a.pose.pos, a.half, a.pose.yaw).contains(world),
                    AgentKind::Pedestrian => {
                        a.pose.pos.dist(world) <= crate::world::state::PED_RADIUS + BEV_CELL / 2.0
                    }
                };
                if covered {
                    count += 1.0;
                }
            }
            for b in &map.buildings {
                if b.rect.contains(world) {
                    count += 1.0;
                }
            }
            for l in &map.lights {
                if l.fixture.dist(world) <= 0.25 + BEV_CELL / 2.0 {
                    count += 1.0;
                }
            }
            data[idx + 1] = count;
        }
    }
    let goal = clamp_goal(ego.to_local(goal_world));
    if let Some((gr, gc)) = bev_cell(goal) {
        data[(gr * BEV_N + gc) * 3 + 2] = 1.0;
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (r, c) = (gr as i64 + dr, gc as i64 + dc);
            if r >= 0 && r < BEV_N as i64 && c >= 0 && c < BEV_N as i64 {
                data[(r as usize * BEV_N + c as usize) * 3 + 2] = 0.5;
            }
        }
    }
    Tensor::new(vec![BEV_N, BEV_N, 3], data)
}

// ── label grids ──

/// 32x32 half-meter grid: 0 = off-road, 1 = road, 2 = lane marking.
pub fn hdmap_labels(snap: &WorldSnapshot, map: &RoadMap) -> Vec<u8> {
    let ego = snap.agents[0].pose;
    let mut out = vec![0u8; HDMAP_N * HDMAP_N];
    for row in 0..HDMAP_N {
        for col in 0..HDMAP_N {
            let local = Vec2::new(
                BEV_RANGE - (row as f64 + 0.5) * HDMAP_CELL,
                BEV_HALF - (col as f64 + 0.5) * HDMAP_CELL,
            );
            out[row * HDMAP_N + col] = match map.ground_class(ego.to_world(local)) {
                GroundClass::Road => 1,
                GroundClass::LaneMarking => 2,
                GroundClass::Sidewalk | GroundClass::Open => 0,
            };
        }
    }
    out
}

/// Ego-frame boxes for every non-ego vehicle whose center is in range.
pub fn det_boxes(snap: &WorldSnapshot) -> Vec<DetBox> {
    let ego = snap.agents[0].pose;
    snap.agents
        .iter()
        .skip(1)
        .filter(|a| a.kind == AgentKind::Vehicle)
        .filter_map(|a| {
            let center = ego.to_local(a.pose.pos);
            detection::cell_of(center)?;
            Some(DetBox {
                center,
                half: a.half,
                yaw: crate::geom::wrap_angle(a.pose.yaw - ego.yaw),
            })
        })
        .collect()
}

// ── one-call bundle ──

#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub camera: CameraFrame,
    pub bev: Tensor<f32>,
    pub hdmap: Vec<u8>,
    pub det: DetTargets,
    pub goal_local: Vec2,
    pub speed: f64,
}

pub fn render_frame(
    snap: &WorldSnapshot,
    map: &RoadMap,
    cond: Condition,
    goal_world: Vec2,
) -> RenderedFrame {
    RenderedFrame {
        camera: render_camera(snap, map, cond),
        bev: rasterize_bev(snap, map, goal_world),
        hdmap: hdmap_labels(snap, map),
        det: detection::encode(&det_boxes(snap)),
        goal_local: clamp_goal(snap.agents[0].pose.to_local(goal_world)),
        speed: snap.agents[0].speed,
    }
}
