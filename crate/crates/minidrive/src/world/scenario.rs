//! Populating a route with traffic, walkers, and adversarial scenario actors.
//! All randomness happens here, at spawn time; stepping is deterministic.

use crate::geom::{Polyline, Pose, Vec2};
use crate::world::map::{RoadMap, JUNCTION_HALF, SIDEWALK_HALF};
use crate::world::route::{Route, ScenarioKind};
use crate::world::state::{Agent, AgentKind, Behavior, Control, WorldState, PED_RADIUS, VEHICLE_HALF};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Drive behavior anchored at `pos`, with its own rng stream for later path
/// growth.
fn driver(seq: Vec<usize>, path: Polyline, pos: Vec2, rng: &mut ChaCha8Rng) -> Behavior {
    let (s, _) = path.project(pos);
    Behavior::Drive {
        seq,
        path,
        s,
        rng: ChaCha8Rng::seed_from_u64(rng.gen()),
        run_red: false,
        armed: true,
        arm_center: pos,
        arm_radius: 0.0,
        stall: 0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpawnConfig {
    pub vehicles: usize,
    pub pedestrians: usize,
    pub seed: u64,
}

/// Random walk over the junction lattice, never immediately backtracking.
fn wander_path(
    map: &RoadMap,
    from: usize,
    to: usize,
    hops: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Polyline) {
    let mut seq = vec![from, to];
    while seq.len() < hops {
        let cur = *seq.last().unwrap();
        let prev = seq[seq.len() - 2];
        let mut options: Vec<usize> =
            map.neighbors(cur).into_iter().filter(|&n| n != prev).collect();
        if options.is_empty() {
            options.push(prev);
        }
        let next = *options.choose(rng).unwrap();
        seq.push(next);
    }
    let path = crate::world::route::assemble_polyline(map, &seq)
        .expect("adjacent junctions always connect");
    (seq, path)
}

/// Straight-through path for a scenario vehicle entering a junction.
fn through_path(map: &RoadMap, from: usize, junction: usize) -> (Vec<usize>, Polyline) {
    let dir_in = (map.junctions[junction].center - map.junctions[from].center).normalized();
    let mut best = None;
    let mut best_dot = 0.2;
    for n in map.neighbors(junction) {
        if n == from {
            continue;
        }
        let d = (map.junctions[n].center - map.junctions[junction].center).normalized();
        if d.dot(dir_in) > best_dot {
            best_dot = d.dot(dir_in);
            best = Some(n);
        }
    }
    let seq = match best {
        Some(n) => vec![from, junction, n],
        None => vec![from, junction],
    };
    let path = crate::world::route::assemble_polyline(map, &seq)
        .expect("adjacent junctions always connect");
    (seq, path)
}

fn far_from_all(p: Vec2, world: &WorldState, min_d: f64) -> bool {
    world.agents.iter().all(|a| a.pose.pos.dist(p) >= min_d)
}

pub fn spawn_world(map: &RoadMap, route: &Route, cfg: &SpawnConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = route.polyline.pts[0];
    let start_dir = route.polyline.direction_at(0.0);
    let mut world = WorldState::new(Pose { pos: start, yaw: start_dir.angle() });

    // ── scenario actors first: they must win their slots ──
    for sc in &route.scenarios {
        match sc {
            ScenarioKind::CrossingPedestrian => {
                if let Some((p, dir)) = crossing_site(map, route) {
                    let right = -dir.perp();
                    world.agents.push(Agent {
                        kind: AgentKind::Pedestrian,
                        pose: Pose { pos: p + right * (SIDEWALK_HALF - 0.75), yaw: dir.perp().angle() },
                        speed: 0.0,
                        half: Vec2::new(PED_RADIUS, PED_RADIUS),
                        behavior: Behavior::Cross {
                            dir: dir.perp(),
                            total: 2.0 * (SIDEWALK_HALF - 0.75),
                            walked: 0.0,
                            speed: 1.5,
                            trigger_center: p,
                            trigger_radius: 13.0,
                            started: false,
                        },
                        ctl: Control::default(),
                    });
                }
            }
            ScenarioKind::RedLightRunner => {
                if let Some((from, j)) = crossing_approach(map, route) {
                    let e = map.edge_between(from, j).unwrap();
                    let lane = &map.edges[e].lane;
                    let s = (lane.length() - 20.0).max(2.0);
                    let pos = lane.point_at(s);
                    let (seq, path) = through_path(map, from, j);
                    let mut behavior = driver(seq, path, pos, &mut rng);
                    if let Behavior::Drive { run_red, armed, arm_center, arm_radius, .. } =
                        &mut behavior
                    {
                        *run_red = true;
                        *armed = false;
                        *arm_center = map.junctions[j].center;
                        *arm_radius = 30.0;
                    }
                    world.agents.push(Agent {
                        kind: AgentKind::Vehicle,
                        pose: Pose { pos, yaw: map.edges[e].dir.angle() },
                        speed: 0.0,
                        half: VEHICLE_HALF,
                        behavior,
                        ctl: Control::default(),
                    });
                }
            }
            ScenarioKind::UnprotectedTurn => {
                if let Some((j, dir_in)) = left_turn_junction(map, route) {
                    // Oncoming approach: the edge entering j against our way.
                    let from = map
                        .neighbors(j)
                        .into_iter()
                        .max_by(|&a, &b| {
                            let da = (map.junctions[j].center - map.junctions[a].center)
                                .normalized()
                                .dot(-dir_in);
                            let db = (map.junctions[j].center - map.junctions[b].center)
                                .normalized()
                                .dot(-dir_in);
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    if let Some(e) = map.edge_between(from, j) {
                        let lane = &map.edges[e].lane;
                        let s = (lane.length() - 26.0).max(2.0);
                        let pos = lane.point_at(s);
                        let (seq, path) = through_path(map, from, j);
                        let mut behavior = driver(seq, path, pos, &mut rng);
                        if let Behavior::Drive { armed, arm_center, arm_radius, .. } = &mut behavior
                        {
                            *armed = false;
                            *arm_center = map.junctions[j].center;
                            *arm_radius = 35.0;
                        }
                        world.agents.push(Agent {
                            kind: AgentKind::Vehicle,
                            pose: Pose { pos, yaw: map.edges[e].dir.angle() },
                            speed: 0.0,
                            half: VEHICLE_HALF,
                            behavior,
                            ctl: Control::default(),
                        });
                    }
                }
            }
        }
    }

    // ── ambient vehicles near the route ──
    // Spawn slots sit every 24 m per lane: filling all of them is the
    // densest traffic the junctions can still drain within a light cycle.
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for (ei, e) in map.edges.iter().enumerate() {
        let mut s = 10.0;
        while s < e.lane.length() - 8.0 {
            let p = e.lane.point_at(s);
            let (_, d) = route.polyline.project(p);
            if d < 60.0 {
                candidates.push((ei, s));
            }
            s += 24.0;
        }
    }
    candidates.shuffle(&mut rng);
    let mut placed = 0;
    for (ei, s) in candidates {
        if placed >= cfg.vehicles {
            break;
        }
        let e = &map.edges[ei];
        let p = e.lane.point_at(s);
        if p.dist(start) < 14.0 || !far_from_all(p, &world, 9.0) {
            continue;
        }
        let hops = rng.gen_range(6..10);
        let (seq, path) = wander_path(map, e.from, e.to, hops, &mut rng);
        world.agents.push(Agent {
            kind: AgentKind::Vehicle,
            pose: Pose { pos: p, yaw: e.dir.angle() },
            speed: 0.0,
            half: VEHICLE_HALF,
            behavior: driver(seq, path, p, &mut rng),
            ctl: Control::default(),
        });
        placed += 1;
    }

    // ── ambient walkers patrolling sidewalks ──
    let mut placed = 0;
    let mut guard = 0;
    while placed < cfg.pedestrians && guard < 400 {
        guard += 1;
        let ei = rng.gen_range(0..map.edges.len());
        let e = &map.edges[ei];
        if e.lane.length() < 20.0 {
            continue;
        }
        let s = rng.gen_range(6.0..e.lane.length() - 14.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let off = e.dir.perp() * (side * (SIDEWALK_HALF - 0.75 + 1.75));
        let a = e.lane.point_at(s) + off;
        let b = e.lane.point_at(s + 8.0) + off;
        let (_, d) = route.polyline.project(a);
        if d > 60.0 || !far_from_all(a, &world, 4.0) {
            continue;
        }
        world.agents.push(Agent {
            kind: AgentKind::Pedestrian,
            pose: Pose { pos: a, yaw: (b - a).angle() },
            speed: 0.0,
            half: Vec2::new(PED_RADIUS, PED_RADIUS),
            behavior: Behavior::Patrol { a, b, to_b: true, speed: 1.2 },
            ctl: Control::default(),
        });
        placed += 1;
    }

    world
}

/// Mid-route point on a plain road stretch, for the crossing walker.
fn crossing_site(map: &RoadMap, route: &Route) -> Option<(Vec2, Vec2)> {
    let total = route.polyline.length();
    let mut s = 0.35 * total;
    while s < total * 0.8 {
        let p = route.polyline.point_at(s);
        if map.junction_distance(p) > JUNCTION_HALF + 4.0 {
            return Some((p, route.polyline.direction_at(s)));
        }
        s += 4.0;
    }
    None
}

/// A mid-route junction plus the neighbor feeding it perpendicular to the
/// ego's entry direction, for the red-light runner.
fn crossing_approach(map: &RoadMap, route: &Route) -> Option<(usize, usize)> {
    let seq = &route.junction_seq;
    for k in (1..seq.len() - 1).rev().take(seq.len() / 2) {
        let j = seq[k];
        let dir_in = (map.junctions[j].center - map.junctions[seq[k - 1]].center).normalized();
        for n in map.neighbors(j) {
            if n == seq[k - 1] || n == seq[k + 1] {
                continue;
            }
            let d = (map.junctions[j].center - map.junctions[n].center).normalized();
            if d.dot(dir_in).abs() < 0.3 {
                return Some((n, j));
            }
        }
    }
    None
}

/// First junction where the route turns left; returns it and the entry
/// direction.
fn left_turn_junction(map: &RoadMap, route: &Route) -> Option<(usize, Vec2)> {
    let seq = &route.junction_seq;
    for k in 1..seq.len() - 1 {
        let a = (map.junctions[seq[k]].center - map.junctions[seq[k - 1]].center).normalized();
        let b = (map.junctions[seq[k + 1]].center - map.junctions[seq[k]].center).normalized();
        let cross = a.x * b.y - a.y * b.x;
        if cross > 0.5 {
            return Some((seq[k], a));
        }
    }
    None
}
