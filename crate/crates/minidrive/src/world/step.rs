//! World advance: NPC decisions, kinematics, and infraction detection in one
//! fixed-order pass. The only randomness is each driver's private path rng.

use crate::geom::{wrap_angle, Obb, Polyline, Vec2};
use crate::world::dynamics::{bicycle_step, DT};
use crate::world::events::{EventTracker, Infraction};
use crate::world::map::{RoadMap, LANE_WIDTH};
use crate::world::route::assemble_polyline;
use crate::world::state::{AgentKind, Behavior, Control, WorldState};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

const NPC_CRUISE: f64 = 4.0;
const NPC_JUNCTION: f64 = 3.0;
const NPC_STEER_GAIN: f64 = 2.0;
const NPC_LOOKAHEAD: f64 = 4.0;
/// Stop this far before a red stop line.
const NPC_RED_MARGIN: f64 = 7.0;
/// Keep at least this much path ahead of a driver; grow before running out.
const PATH_RESERVE: f64 = 80.0;
/// Stopped longer than this (15 s, beyond any signal wait) means gridlock:
/// stop yielding to other stopped vehicles and creep clear.
const STALL_BREAK: u32 = 300;

/// What an ambient vehicle does: pure pursuit on its path, a proportional
/// speed loop, and two vetoes (red signal ahead, agent in the brake zone).
fn drive_policy(
    idx: usize,
    world: &WorldState,
    map: &RoadMap,
    path: &Polyline,
    s: f64,
    run_red: bool,
    stall: u32,
) -> Control {
    let me = &world.agents[idx];
    if s >= path.length() - 2.0 {
        return Control { steer: 0.0, throttle: 0.0, brake: true };
    }
    let target = path.point_at(s + NPC_LOOKAHEAD);
    let heading_err = wrap_angle((target - me.pose.pos).angle() - me.pose.yaw);
    let steer = (NPC_STEER_GAIN * heading_err).clamp(-1.0, 1.0);

    let mut desired = if map.junction_distance(me.pose.pos) < 2.0 { NPC_JUNCTION } else { NPC_CRUISE };

    if !run_red {
        for light in &map.lights {
            let dir = map.edges[light.edge].dir;
            let rel = light.stop_line - me.pose.pos;
            let ahead = rel.dot(me.pose.forward());
            let lateral = rel.dot(me.pose.forward().perp()).abs();
            if ahead > 0.5
                && ahead < NPC_RED_MARGIN
                && lateral < LANE_WIDTH / 2.0
                && me.pose.forward().dot(dir) > 0.7
                && map.light_is_red(light, world.t)
            {
                desired = 0.0;
            }
        }
    }

    // Gridlock escape: past the stall threshold, parked peers (never
    // pedestrians) no longer hold us. The ego keeps its right of way twice
    // as long — but a driver pinned half a minute must eventually creep
    // past it, or an ego waiting on that very driver deadlocks the pair.
    let ignores = |j: usize, other: &crate::world::state::Agent| {
        other.kind == AgentKind::Vehicle
            && other.speed < 0.1
            && (stall > if j == 0 { 2 * STALL_BREAK } else { STALL_BREAK })
    };

    // Entry gate: don't enter a junction box while a vehicle is struggling
    // inside it. Fast crossers clear before we arrive; slow ones are the
    // seeds of gridlock.
    if map.junction_distance(me.pose.pos) > 0.1 {
        let probe = path.point_at((s + me.half.x + 3.0).min(path.length()));
        for junction in &map.junctions {
            if !junction.square().contains(probe) {
                continue;
            }
            for (j, other) in world.agents.iter().enumerate() {
                if j != idx
                    && other.kind == AgentKind::Vehicle
                    && other.speed < 1.5
                    && !ignores(j, other)
                    && junction.square().contains(other.pose.pos)
                {
                    desired = 0.0;
                }
            }
        }
    }

    // Brake zone grows with speed: v^2/(2*6) of headway plus a fixed apron.
    let zone_len = 4.0 + me.speed * me.speed / 12.0;
    let zone = Obb::new(
        me.pose.pos + me.pose.forward() * (me.half.x + zone_len * 0.5),
        Vec2::new(zone_len * 0.5, 1.0),
        me.pose.yaw,
    );
    for (j, other) in world.agents.iter().enumerate() {
        if j == idx || ignores(j, other) {
            continue;
        }
        let blocked = match other.kind {
            AgentKind::Vehicle => zone.intersects(&other.obb()),
            AgentKind::Pedestrian => zone.intersects_circle(other.pose.pos, other.radius()),
        };
        if blocked {
            desired = 0.0;
        }
    }

    let u = desired - me.speed;
    if desired == 0.0 {
        Control { steer, throttle: 0.0, brake: me.speed > 0.01 }
    } else {
        Control { steer, throttle: u.clamp(0.0, 0.75), brake: u < -0.5 }
    }
}

/// Append random non-backtracking junctions until the path reserve is met.
/// Only the tail beyond the driver's position changes, so `s` stays valid.
fn grow_path(map: &RoadMap, seq: &mut Vec<usize>, path: &mut Polyline, s: f64, rng: &mut ChaCha8Rng) {
    while path.length() < s + PATH_RESERVE {
        let cur = *seq.last().unwrap();
        let prev = seq[seq.len() - 2];
        let mut options: Vec<usize> =
            map.neighbors(cur).into_iter().filter(|&n| n != prev).collect();
        if options.is_empty() {
            options.push(prev);
        }
        seq.push(*options.choose(rng).unwrap());
        *path = assemble_polyline(map, seq).expect("adjacent junctions always connect");
    }
}

/// Advance one tick. `ego_ctl` is applied to agent 0; every other agent runs
/// its own behavior. Returns the infractions that fired this tick.
pub fn step_world(
    world: &mut WorldState,
    map: &RoadMap,
    ego_ctl: Control,
    tracker: &mut EventTracker,
) -> Vec<Infraction> {
    let ego_pos = world.ego().pose.pos;

    // Decide all controls against the pre-step state, then move everyone.
    let mut controls: Vec<Option<Control>> = vec![None; world.agents.len()];
    controls[0] = Some(ego_ctl);
    for i in 1..world.agents.len() {
        let agent = &world.agents[i];
        match &agent.behavior {
            Behavior::Drive { path, s, run_red, armed, stall, .. } => {
                controls[i] = Some(if *armed {
                    drive_policy(i, world, map, path, *s, *run_red, *stall)
                } else {
                    Control { steer: 0.0, throttle: 0.0, brake: true }
                });
            }
            Behavior::Ego | Behavior::Patrol { .. } | Behavior::Cross { .. } => {}
        }
    }

    for i in 0..world.agents.len() {
        let agent = &mut world.agents[i];
        match &mut agent.behavior {
            Behavior::Ego => {
                let (pose, v) = bicycle_step(agent.pose, agent.speed, &ego_ctl, DT);
                agent.pose = pose;
                agent.speed = v;
                agent.ctl = ego_ctl;
            }
            Behavior::Drive { seq, path, s, rng, armed, arm_center, arm_radius, stall, .. } => {
                if !*armed && ego_pos.dist(*arm_center) < *arm_radius {
                    *armed = true;
                }
                let ctl = controls[i].unwrap();
                let (pose, v) = bicycle_step(agent.pose, agent.speed, &ctl, DT);
                agent.pose = pose;
                agent.speed = v;
                agent.ctl = ctl;
                if *armed {
                    *s = path.project_near(pose.pos, *s, 5.0, 15.0).0;
                    grow_path(map, seq, path, *s, rng);
                    // Escape latches until the agent is properly rolling, so
                    // stop-and-go creep can't re-arm the yield and re-freeze.
                    if v < 0.1 {
                        *stall += 1;
                    } else if v > 1.0 {
                        *stall = 0;
                    }
                }
            }
            Behavior::Patrol { a, b, to_b, speed } => {
                let target = if *to_b { *b } else { *a };
                let to = target - agent.pose.pos;
                if to.norm() < 0.3 {
                    *to_b = !*to_b;
                } else {
                    let dir = to.normalized();
                    agent.pose.pos = agent.pose.pos + dir * (*speed * DT);
                    agent.pose.yaw = dir.angle();
                    agent.speed = *speed;
                }
            }
            Behavior::Cross {
                dir,
                total,
                walked,
                speed,
                trigger_center,
                trigger_radius,
                started,
            } => {
                if !*started && ego_pos.dist(*trigger_center) < *trigger_radius {
                    *started = true;
                }
                if *started && *walked < *total {
                    agent.pose.pos = agent.pose.pos + *dir * (*speed * DT);
                    agent.pose.yaw = dir.angle();
                    agent.speed = *speed;
                    *walked += *speed * DT;
                } else {
                    agent.speed = 0.0;
                }
            }
        }
    }

    world.t += DT;
    world.tick += 1;
    tracker.tick(world, map)
}
