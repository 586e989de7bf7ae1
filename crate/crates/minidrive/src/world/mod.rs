//! The micro-world: maps, routes, agents, kinematics, and infractions.

pub mod dynamics;
pub mod events;
pub mod map;
pub mod route;
pub mod scenario;
pub mod state;
pub mod step;
