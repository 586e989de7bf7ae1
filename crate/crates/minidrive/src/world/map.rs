//! Procedural grid cities: junctions on a lattice, one lane per direction,
//! signalized approaches, and block-interior buildings that occlude and
//! collide. Every map is a pure function of its id.

use crate::geom::{Obb, Polyline, Vec2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LANE_WIDTH: f64 = 3.5;
pub const LANE_OFFSET: f64 = LANE_WIDTH / 2.0;
pub const ROAD_HALF: f64 = LANE_WIDTH;
pub const SIDEWALK_HALF: f64 = LANE_WIDTH + 2.0;
pub const JUNCTION_HALF: f64 = 6.0;
pub const MARKING_HALF: f64 = 0.15;
/// Signal cycle: axis A green [0,8), all red [8,10), axis B green [10,18),
/// all red [18,20).
pub const LIGHT_PERIOD: f64 = 20.0;

pub const MAP_COUNT: u32 = 6;

#[derive(Clone, Debug)]
pub struct Junction {
    pub center: Vec2,
    pub half: f64,
    pub phase_offset: f64,
}

impl Junction {
    pub fn square(&self) -> Obb {
        Obb::axis_aligned(self.center, Vec2::new(self.half, self.half))
    }
}

/// Directed lane between two adjacent junctions, clipped to their squares,
/// offset to the right of travel.
#[derive(Clone, Debug)]
pub struct RoadEdge {
    pub from: usize,
    pub to: usize,
    pub lane: Polyline,
    pub dir: Vec2,
}

#[derive(Clone, Debug)]
pub struct Building {
    pub rect: Obb,
    pub height: f64,
}

/// One signal head per junction approach. `ns` marks the north-south axis.
#[derive(Clone, Debug)]
pub struct TrafficLight {
    pub junction: usize,
    pub edge: usize,
    pub trigger: Obb,
    pub stop_line: Vec2,
    pub fixture: Vec2,
    pub ns: bool,
}

#[derive(Clone, Debug)]
pub struct RoadMap {
    pub id: u32,
    pub nx: usize,
    pub ny: usize,
    pub block: f64,
    pub junctions: Vec<Junction>,
    pub edges: Vec<RoadEdge>,
    pub buildings: Vec<Building>,
    pub lights: Vec<TrafficLight>,
    /// Undirected road center segments between junction centers.
    pub road_segments: Vec<(Vec2, Vec2)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroundClass {
    Open,
    Road,
    LaneMarking,
    Sidewalk,
}

impl RoadMap {
    pub fn build(id: u32) -> RoadMap {
        assert!(id < MAP_COUNT, "map id out of range");
        let (nx, ny, block) = match id {
            0 => (3, 3, 40.0),
            1 => (3, 4, 36.0),
            2 => (4, 3, 44.0),
            3 => (4, 4, 40.0),
            4 => (3, 3, 48.0),
            _ => (4, 4, 36.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_7000 + id as u64);

        let mut junctions = Vec::with_capacity(nx * ny);
        for gy in 0..ny {
            for gx in 0..nx {
                junctions.push(Junction {
                    center: Vec2::new(gx as f64 * block, gy as f64 * block),
                    half: JUNCTION_HALF,
                    phase_offset: rng.gen_range(0.0..LIGHT_PERIOD),
                });
            }
        }

        let jid = |gx: usize, gy: usize| gy * nx + gx;
        let mut edges = Vec::new();
        let mut road_segments = Vec::new();
        let add_pair = |a: usize, b: usize, junctions: &[Junction], edges: &mut Vec<RoadEdge>| {
            for (from, to) in [(a, b), (b, a)] {
                let ca = junctions[from].center;
                let cb = junctions[to].center;
                let dir = (cb - ca).normalized();
                let right = -dir.perp();
                let start = ca + dir * JUNCTION_HALF + right * LANE_OFFSET;
                let end = cb - dir * JUNCTION_HALF + right * LANE_OFFSET;
                edges.push(RoadEdge { from, to, lane: Polyline::new(vec![start, end]), dir });
            }
        };
        for gy in 0..ny {
            for gx in 0..nx {
                if gx + 1 < nx {
                    add_pair(jid(gx, gy), jid(gx + 1, gy), &junctions, &mut edges);
                    road_segments.push((junctions[jid(gx, gy)].center, junctions[jid(gx + 1, gy)].center));
                }
                if gy + 1 < ny {
                    add_pair(jid(gx, gy), jid(gx, gy + 1), &junctions, &mut edges);
                    road_segments.push((junctions[jid(gx, gy)].center, junctions[jid(gx, gy + 1)].center));
                }
            }
        }

        let mut lights = Vec::new();
        for (ei, e) in edges.iter().enumerate() {
            let end = *e.lane.pts.last().unwrap();
            let right = -e.dir.perp();
            lights.push(TrafficLight {
                junction: e.to,
                edge: ei,
                trigger: Obb::new(
                    end - e.dir * 2.0,
                    Vec2::new(2.0, LANE_WIDTH / 2.0),
                    e.dir.angle(),
                ),
                stop_line: end,
                fixture: end + right * 2.0,
                ns: e.dir.y.abs() > e.dir.x.abs(),
            });
        }

        let mut buildings = Vec::new();
        for gy in 0..ny.saturating_sub(1) {
            for gx in 0..nx.saturating_sub(1) {
                let lo = Vec2::new(gx as f64 * block, gy as f64 * block);
                // Usable interior: past the sidewalks plus a margin.
                let inset = SIDEWALK_HALF + 2.0;
                let lo = lo + Vec2::new(inset, inset);
                let hi = Vec2::new((gx + 1) as f64 * block, (gy + 1) as f64 * block)
                    - Vec2::new(inset, inset);
                let span = hi - lo;
                if span.x < 8.0 || span.y < 8.0 {
                    continue;
                }
                for _ in 0..2 {
                    let hx = rng.gen_range(3.0..(span.x / 2.0).min(9.0));
                    let hy = rng.gen_range(3.0..(span.y / 2.0).min(9.0));
                    let cx = rng.gen_range(lo.x + hx..hi.x - hx);
                    let cy = rng.gen_range(lo.y + hy..hi.y - hy);
                    buildings.push(Building {
                        rect: Obb::axis_aligned(Vec2::new(cx, cy), Vec2::new(hx, hy)),
                        height: rng.gen_range(3.0..9.0),
                    });
                }
            }
        }

        RoadMap { id, nx, ny, block, junctions, edges, buildings, lights, road_segments }
    }

    pub fn junction_grid(&self, gx: usize, gy: usize) -> usize {
        gy * self.nx + gx
    }

    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        let (gx, gy) = (j % self.nx, j / self.nx);
        let mut out = Vec::with_capacity(4);
        if gx > 0 {
            out.push(j - 1);
        }
        if gx + 1 < self.nx {
            out.push(j + 1);
        }
        if gy > 0 {
            out.push(j - self.nx);
        }
        if gy + 1 < self.ny {
            out.push(j + self.nx);
        }
        out
    }

    pub fn edge_between(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.from == from && e.to == to)
    }

    pub fn in_junction(&self, p: Vec2) -> bool {
        self.junctions.iter().any(|j| j.square().contains(p))
    }

    /// Distance from a point to the nearest junction square boundary
    /// (zero inside).
    pub fn junction_distance(&self, p: Vec2) -> f64 {
        let mut best = f64::INFINITY;
        for j in &self.junctions {
            let d = p - j.center;
            let dx = (d.x.abs() - j.half).max(0.0);
            let dy = (d.y.abs() - j.half).max(0.0);
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        best
    }

    pub fn ground_class(&self, p: Vec2) -> GroundClass {
        if self.in_junction(p) {
            return GroundClass::Road;
        }
        let mut best_lat = f64::INFINITY;
        for &(a, b) in &self.road_segments {
            let ab = b - a;
            let len = ab.norm();
            let dir = ab * (1.0 / len);
            let rel = p - a;
            let lon = rel.dot(dir);
            if !(0.0..=len).contains(&lon) {
                continue;
            }
            best_lat = best_lat.min(rel.dot(dir.perp()).abs());
        }
        if best_lat <= MARKING_HALF {
            GroundClass::LaneMarking
        } else if best_lat <= ROAD_HALF {
            GroundClass::Road
        } else if best_lat <= SIDEWALK_HALF {
            GroundClass::Sidewalk
        } else {
            GroundClass::Open
        }
    }

    /// Red state of a signal head at time t.
    pub fn light_is_red(&self, light: &TrafficLight, t: f64) -> bool {
        let phase = (t + self.junctions[light.junction].phase_offset).rem_euclid(LIGHT_PERIOD);
        let green = if light.ns { phase < 8.0 } else { (10.0..18.0).contains(&phase) };
        !green
    }

    /// World extent (for rasterization and spawn bounds).
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let m = self.block;
        (
            Vec2::new(-m * 0.5, -m * 0.5),
            Vec2::new((self.nx as f64 - 0.5) * m, (self.ny as f64 - 0.5) * m),
        )
    }
}

/// Connector inside a junction from the end of one lane to the start of the
/// next: straight when collinear, otherwise a sampled quadratic Bezier whose
/// control point is the intersection of the two lane lines.
pub fn junction_connector(p1: Vec2, d1: Vec2, p2: Vec2, d2: Vec2) -> Vec<Vec2> {
    if d1.dot(d2) > 0.9 {
        return vec![p1, p2];
    }
    // Solve p1 + t*d1 = p2 - u*d2.
    let det = d1.x * (-d2.y) - (-d2.x) * d1.y;
    let ctrl = if det.abs() < 1e-9 {
        (p1 + p2) * 0.5
    } else {
        let rx = p2.x - p1.x;
        let ry = p2.y - p1.y;
        let t = (rx * (-d2.y) - (-d2.x) * ry) / det;
        p1 + d1 * t
    };
    let n = 8;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let a = p1 + (ctrl - p1) * t;
            let b = ctrl + (p2 - ctrl) * t;
            a + (b - a) * t
        })
        .collect()
}
