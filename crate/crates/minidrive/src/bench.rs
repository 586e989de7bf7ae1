//! Closed-loop route evaluation. A driver is scored per route as
//! completion x infraction multiplier, the suite score is the mean over
//! routes, and repeated suite runs give a mean and sample deviation.

use crate::world::dynamics::DT;
use crate::world::events::{goal_reached, EventTracker, InfractionKind};
use crate::world::map::{GroundClass, RoadMap};
use crate::world::route::{build_route, longest_routes, Condition, Route, ScenarioKind};
use crate::world::scenario::{spawn_world, SpawnConfig};
use crate::world::state::{Control, WorldState};
use crate::world::step::step_world;
use rayon::prelude::*;

/// Multiplicative penalty per infraction, by kind.
pub const PENALTY_PEDESTRIAN: f64 = 0.50;
pub const PENALTY_VEHICLE: f64 = 0.60;
pub const PENALTY_STATIC: f64 = 0.65;
pub const PENALTY_RED_LIGHT: f64 = 0.70;

/// Standing still this long ends the route as blocked.
const BLOCK_SECONDS: f64 = 90.0;
/// Time budget: the route length at this speed.
const TIMEOUT_SPEED: f64 = 1.0;
/// Straying this far from the route ends it.
const DEVIATION_LIMIT: f64 = 15.0;
const STANDSTILL: f64 = 0.1;

pub trait Driver: Send {
    fn control(&mut self, world: &WorldState, map: &RoadMap) -> Control;
}

impl Driver for crate::expert::Expert {
    fn control(&mut self, world: &WorldState, map: &RoadMap) -> Control {
        crate::expert::Expert::control(self, world, map)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Finished,
    Blocked,
    Timeout,
    Deviated,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Finished => "finished",
            Outcome::Blocked => "blocked",
            Outcome::Timeout => "timeout",
            Outcome::Deviated => "deviated",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RouteRecord {
    pub outcome: Outcome,
    pub completion: f64,
    pub infraction_score: f64,
    pub driving_score: f64,
    pub driven_m: f64,
    pub off_road_m: f64,
    /// Infraction counts: [pedestrian, vehicle, static, red light].
    pub counts: [usize; 4],
    pub ticks: u64,
}

/// Progress scaled down by the fraction of distance driven off-road.
pub fn route_completion(progress: f64, off_road_m: f64, driven_m: f64) -> f64 {
    let on_road = if driven_m > 0.0 { 1.0 - off_road_m / driven_m } else { 1.0 };
    (progress * on_road).clamp(0.0, 1.0)
}

pub fn kind_index(kind: InfractionKind) -> usize {
    match kind {
        InfractionKind::CollisionPedestrian => 0,
        InfractionKind::CollisionVehicle => 1,
        InfractionKind::CollisionStatic => 2,
        InfractionKind::RedLight => 3,
    }
}

pub fn infraction_score(counts: &[usize; 4]) -> f64 {
    PENALTY_PEDESTRIAN.powi(counts[0] as i32)
        * PENALTY_VEHICLE.powi(counts[1] as i32)
        * PENALTY_STATIC.powi(counts[2] as i32)
        * PENALTY_RED_LIGHT.powi(counts[3] as i32)
}

/// Drive one route to termination and score it. Completion is the furthest
/// route progress scaled down by the fraction of distance driven off-road.
pub fn run_route(
    map: &RoadMap,
    route: &Route,
    driver: &mut dyn Driver,
    spawn: &SpawnConfig,
) -> RouteRecord {
    let mut world = spawn_world(map, route, spawn);
    let mut tracker = EventTracker::new(map, &world);
    let goal = *route.polyline.pts.last().unwrap();
    let length = route.polyline.length();
    let timeout_ticks = (length / TIMEOUT_SPEED / DT).ceil() as u64;
    let block_ticks = (BLOCK_SECONDS / DT).round() as u64;

    let mut counts = [0usize; 4];
    let mut s_max: f64 = 0.0;
    let mut driven = 0.0;
    let mut off_road = 0.0;
    let mut standstill = 0u64;
    let mut prev_pos = world.ego().pose.pos;

    let outcome = loop {
        let ctl = driver.control(&world, map);
        for inf in step_world(&mut world, &map, ctl, &mut tracker) {
            counts[kind_index(inf.kind)] += 1;
        }
        let ego = world.ego();
        let step_m = ego.pose.pos.dist(prev_pos);
        prev_pos = ego.pose.pos;
        driven += step_m;
        match map.ground_class(ego.pose.pos) {
            GroundClass::Road | GroundClass::LaneMarking => {}
            GroundClass::Sidewalk | GroundClass::Open => off_road += step_m,
        }
        let (s, dev) = route.polyline.project(ego.pose.pos);
        s_max = s_max.max(s);

        if goal_reached(ego.pose.pos, goal) {
            break Outcome::Finished;
        }
        if dev > DEVIATION_LIMIT {
            break Outcome::Deviated;
        }
        standstill = if ego.speed < STANDSTILL { standstill + 1 } else { 0 };
        if standstill >= block_ticks {
            break Outcome::Blocked;
        }
        if world.tick >= timeout_ticks {
            break Outcome::Timeout;
        }
    };

    let progress = if outcome == Outcome::Finished { 1.0 } else { (s_max / length).min(1.0) };
    let completion = route_completion(progress, off_road, driven);
    let is = infraction_score(&counts);
    RouteRecord {
        outcome,
        completion,
        infraction_score: is,
        driving_score: completion * is,
        driven_m: driven,
        off_road_m: off_road,
        counts,
        ticks: world.tick,
    }
}

// ── the evaluation suite ──

#[derive(Clone, Debug)]
pub struct RouteSpec {
    pub map_id: u32,
    pub start: usize,
    pub goal: usize,
    pub condition: Condition,
    pub scenarios: Vec<ScenarioKind>,
}

impl RouteSpec {
    pub fn build(&self) -> (RoadMap, Route) {
        let map = RoadMap::build(self.map_id);
        let route = build_route(&map, &[self.start, self.goal], self.condition, self.scenarios.clone())
            .expect("suite routes always resolve");
        (map, route)
    }
}

/// Six longest routes on each of the six maps. Conditions form a Latin
/// square, so every weather x daylight pair appears exactly once, and every
/// route carries all three adversarial scenarios.
pub fn benchmark_suite() -> Vec<RouteSpec> {
    let mut specs = Vec::new();
    for map_id in 0..6u32 {
        let map = RoadMap::build(map_id);
        for (r, seq) in longest_routes(&map, 6).into_iter().enumerate() {
            specs.push(RouteSpec {
                map_id,
                start: *seq.first().unwrap(),
                goal: *seq.last().unwrap(),
                condition: Condition {
                    weather: ((map_id as usize + r) % 6) as u8,
                    daylight: r as u8,
                },
                scenarios: vec![
                    ScenarioKind::CrossingPedestrian,
                    ScenarioKind::RedLightRunner,
                    ScenarioKind::UnprotectedTurn,
                ],
            });
        }
    }
    specs
}

#[derive(Clone, Debug)]
pub struct BenchStats {
    pub ds_mean: f64,
    pub ds_std: f64,
    pub rc_mean: f64,
    pub rc_std: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub km_driven: f64,
    /// Pooled infractions per km: [pedestrian, vehicle, static, red light].
    pub rate_per_km: [f64; 4],
    /// Km driven off-road over km driven, as a percentage.
    pub off_road_pct: f64,
    /// Terminations per km: [deviated, timeout, blocked].
    pub termination_per_km: [f64; 3],
    pub outcomes: [usize; 4],
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every spec `reps` times (fresh traffic each rep) in parallel over
/// routes. Suite-level DS/RC/IS are averaged per rep; the spread is the
/// sample deviation across reps.
pub fn run_benchmark<F>(
    specs: &[RouteSpec],
    reps: usize,
    base_seed: u64,
    density: (usize, usize),
    factory: F,
) -> (Vec<Vec<RouteRecord>>, BenchStats)
where
    F: Fn(&Route) -> Box<dyn Driver> + Sync,
{
    let results: Vec<Vec<RouteRecord>> = (0..reps)
        .map(|rep| {
            specs
                .par_iter()
                .enumerate()
                .map(|(i, spec)| {
                    let (map, route) = spec.build();
                    let spawn = SpawnConfig {
                        vehicles: density.0,
                        pedestrians: density.1,
                        seed: base_seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add((rep * 1000 + i) as u64),
                    };
                    let mut driver = factory(&route);
                    run_route(&map, &route, driver.as_mut(), &spawn)
                })
                .collect()
        })
        .collect();

    let stats = aggregate(&results);
    (results, stats)
}

/// Suite statistics from per-rep, per-route records: DS/RC/IS are averaged
/// within each rep, then mean and sample deviation are taken across reps;
/// counts and distances pool over everything.
pub fn aggregate(results: &[Vec<RouteRecord>]) -> BenchStats {
    let per_rep = |f: &dyn Fn(&RouteRecord) -> f64| -> Vec<f64> {
        results
            .iter()
            .map(|rep| rep.iter().map(|r| f(r)).sum::<f64>() / rep.len() as f64)
            .collect()
    };
    let ds = mean_std(&per_rep(&|r| r.driving_score));
    let rc = mean_std(&per_rep(&|r| r.completion));
    let is = mean_std(&per_rep(&|r| r.infraction_score));
    pool_stats(results.iter().flatten(), ds, rc, is)
}

fn pool_stats<'a>(
    records: impl Iterator<Item = &'a RouteRecord>,
    ds: (f64, f64),
    rc: (f64, f64),
    is: (f64, f64),
) -> BenchStats {
    let mut km = 0.0;
    let mut off_km = 0.0;
    let mut totals = [0usize; 4];
    let mut outcomes = [0usize; 4];
    for r in records {
        km += r.driven_m / 1000.0;
        off_km += r.off_road_m / 1000.0;
        for k in 0..4 {
            totals[k] += r.counts[k];
        }
        let o = match r.outcome {
            Outcome::Finished => 0,
            Outcome::Blocked => 1,
            Outcome::Timeout => 2,
            Outcome::Deviated => 3,
        };
        outcomes[o] += 1;
    }
    let per_km = |n: usize| if km > 0.0 { n as f64 / km } else { 0.0 };
    BenchStats {
        ds_mean: ds.0,
        ds_std: ds.1,
        rc_mean: rc.0,
        rc_std: rc.1,
        is_mean: is.0,
        is_std: is.1,
        km_driven: km,
        rate_per_km: [per_km(totals[0]), per_km(totals[1]), per_km(totals[2]), per_km(totals[3])],
        off_road_pct: if km > 0.0 { 100.0 * off_km / km } else { 0.0 },
        termination_per_km: [per_km(outcomes[3]), per_km(outcomes[2]), per_km(outcomes[1])],
        outcomes,
    }
}
