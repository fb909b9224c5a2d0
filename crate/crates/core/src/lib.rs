//! Urban bus navigation engine: transit network model, Wifi-based ride
//! detection, journey planning, trip tracking with micro-navigation guidance,
//! and a deterministic simulated city to drive it all.

pub mod detection;
pub mod engine;
pub mod geo;
pub mod network;
pub mod planner;
pub mod sim;
pub mod trace;
pub mod tracker;
