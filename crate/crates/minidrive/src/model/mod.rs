//! Fused perception-and-planning network.

pub mod config;
pub mod net;
pub mod stats;
