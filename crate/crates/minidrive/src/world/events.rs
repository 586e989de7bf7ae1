//! Infraction detection with per-source debouncing. Only ego infractions are
//! tracked; a vehicle contact that touches nothing of the ego's front half is
//! attributed to the other party and ignored.

use crate::geom::Vec2;
use crate::world::map::{RoadMap, LANE_WIDTH};
use crate::world::state::{AgentKind, WorldState};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionStatic,
    RedLight,
}

impl InfractionKind {
    pub fn name(self) -> &'static str {
        match self {
            InfractionKind::CollisionPedestrian => "collision_pedestrian",
            InfractionKind::CollisionVehicle => "collision_vehicle",
            InfractionKind::CollisionStatic => "collision_static",
            InfractionKind::RedLight => "red_light",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Infraction {
    pub kind: InfractionKind,
    pub tick: u64,
}

/// Contact onset detector: an event fires when a contact key goes from clear
/// to touching; re-arming requires the contact to break first.
pub struct EventTracker {
    agent_contact: Vec<bool>,
    building_contact: Vec<bool>,
    light_prev_ahead: Vec<f64>,
}

impl EventTracker {
    pub fn new(map: &RoadMap, world: &WorldState) -> EventTracker {
        EventTracker {
            agent_contact: vec![false; world.agents.len()],
            building_contact: vec![false; map.buildings.len()],
            light_prev_ahead: vec![f64::NEG_INFINITY; map.lights.len()],
        }
    }

    pub fn tick(&mut self, world: &WorldState, map: &RoadMap) -> Vec<Infraction> {
        let mut out = Vec::new();
        let ego = world.ego();
        let ego_box = ego.obb();
        let ego_front = ego_box.front_half();
        self.agent_contact.resize(world.agents.len(), false);

        for (i, other) in world.agents.iter().enumerate().skip(1) {
            let (touching, counts) = match other.kind {
                AgentKind::Vehicle => {
                    let t = ego_box.intersects(&other.obb());
                    // Rear-end exclusion: blame requires ego's front half.
                    (t, t && ego_front.intersects(&other.obb()))
                }
                AgentKind::Pedestrian => {
                    let t = ego_box.intersects_circle(other.pose.pos, other.radius());
                    (t, t)
                }
            };
            if counts && !self.agent_contact[i] {
                out.push(Infraction {
                    kind: match other.kind {
                        AgentKind::Vehicle => InfractionKind::CollisionVehicle,
                        AgentKind::Pedestrian => InfractionKind::CollisionPedestrian,
                    },
                    tick: world.tick,
                });
            }
            self.agent_contact[i] = touching;
        }

        for (i, b) in map.buildings.iter().enumerate() {
            let touching = ego_box.intersects(&b.rect);
            if touching && !self.building_contact[i] {
                out.push(Infraction { kind: InfractionKind::CollisionStatic, tick: world.tick });
            }
            self.building_contact[i] = touching;
        }

        // Red light: fires when the ego advances across a stop line it is
        // lined up with while the signal is red.
        for (i, light) in map.lights.iter().enumerate() {
            let dir = map.edges[light.edge].dir;
            let rel = ego.pose.pos - light.stop_line;
            let ahead = rel.dot(dir);
            let lateral = rel.dot(dir.perp()).abs();
            let aligned = lateral < LANE_WIDTH && ego.pose.forward().dot(dir) > 0.5;
            if aligned
                && ahead > 0.0
                && ahead < 3.0
                && self.light_prev_ahead[i] <= 0.0
                && self.light_prev_ahead[i] > -6.0
                && map.light_is_red(light, world.t)
            {
                out.push(Infraction { kind: InfractionKind::RedLight, tick: world.tick });
            }
            self.light_prev_ahead[i] = if aligned { ahead } else { f64::NEG_INFINITY };
        }

        out
    }
}

/// Goal-point distance used by several consumers to call a route done.
pub fn goal_reached(ego_pos: Vec2, goal: Vec2) -> bool {
    ego_pos.dist(goal) < 4.0
}
