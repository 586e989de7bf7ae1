//! Agents and the mutable world snapshot. Agent 0 is always the ego vehicle.

use crate::geom::{Obb, Polyline, Pose, Vec2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const VEHICLE_HALF: Vec2 = Vec2 { x: 1.8, y: 0.8 };
pub const VEHICLE_HEIGHT: f64 = 1.6;
pub const PED_RADIUS: f64 = 0.35;
pub const PED_HEIGHT: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub steer: f64,
    pub throttle: f64,
    pub brake: bool,
}

/// How a non-ego agent decides what to do each tick.
#[derive(Clone, Debug)]
pub enum Behavior {
    Ego,
    /// Follow a lane-level path; the junction sequence grows from the agent's
    /// own rng stream whenever the end draws near, so drivers never park.
    /// Scenario actors stay frozen until the ego comes within the arm radius.
    Drive {
        seq: Vec<usize>,
        path: Polyline,
        s: f64,
        rng: ChaCha8Rng,
        run_red: bool,
        armed: bool,
        arm_center: Vec2,
        arm_radius: f64,
        /// Ticks spent stopped; past a threshold the driver stops yielding
        /// to other stopped vehicles, dissolving junction gridlock.
        stall: u32,
    },
    /// Patrol a sidewalk segment back and forth.
    Patrol { a: Vec2, b: Vec2, to_b: bool, speed: f64 },
    /// Stand still until the ego comes near, then cross the road.
    Cross {
        dir: Vec2,
        total: f64,
        walked: f64,
        speed: f64,
        trigger_center: Vec2,
        trigger_radius: f64,
        started: bool,
    },
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub kind: AgentKind,
    pub pose: Pose,
    pub speed: f64,
    pub half: Vec2,
    pub behavior: Behavior,
    /// Control applied on the most recent tick; forecasting replays it.
    pub ctl: Control,
}

impl Agent {
    pub fn ego(pose: Pose) -> Agent {
        Agent {
            kind: AgentKind::Vehicle,
            pose,
            speed: 0.0,
            half: VEHICLE_HALF,
            behavior: Behavior::Ego,
            ctl: Control::default(),
        }
    }

    pub fn obb(&self) -> Obb {
        Obb::new(self.pose.pos, self.half, self.pose.yaw)
    }

    pub fn radius(&self) -> f64 {
        match self.kind {
            AgentKind::Vehicle => self.half.norm(),
            AgentKind::Pedestrian => PED_RADIUS,
        }
    }

    pub fn height(&self) -> f64 {
        match self.kind {
            AgentKind::Vehicle => VEHICLE_HEIGHT,
            AgentKind::Pedestrian => PED_HEIGHT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub t: f64,
    pub tick: u64,
    pub agents: Vec<Agent>,
}

impl WorldState {
    pub fn new(ego_pose: Pose) -> WorldState {
        WorldState { t: 0.0, tick: 0, agents: vec![Agent::ego(ego_pose)] }
    }

    pub fn ego(&self) -> &Agent {
        &self.agents[0]
    }

    pub fn ego_mut(&mut self) -> &mut Agent {
        &mut self.agents[0]
    }
}

/// Kinematic freeze of one agent, all that rendering needs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub kind: AgentKind,
    pub pose: Pose,
    pub speed: f64,
    pub half: Vec2,
}

/// Renderable freeze of the world at one instant. Signal phases are a pure
/// function of `t`, so storing the clock preserves light states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub map_id: u32,
    pub t: f64,
    pub agents: Vec<AgentSnapshot>,
}

impl WorldSnapshot {
    pub fn of(world: &WorldState, map_id: u32) -> WorldSnapshot {
        WorldSnapshot {
            map_id,
            t: world.t,
            agents: world
                .agents
                .iter()
                .map(|a| AgentSnapshot { kind: a.kind, pose: a.pose, speed: a.speed, half: a.half })
                .collect(),
        }
    }
}
