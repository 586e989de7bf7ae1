//! A desk-scale end-to-end driving stack: a deterministic 2D micro-world
//! with camera / birds-eye sensing, a privileged rule-based expert, a
//! transformer-fusion imitation network, and a closed-loop benchmark.

pub mod bench;
pub mod data;
pub mod detection;
pub mod expert;
pub mod geom;
pub mod losses;
pub mod model;
pub mod pid;
pub mod sensors;
pub mod train;
pub mod world;
