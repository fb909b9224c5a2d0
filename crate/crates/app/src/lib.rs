//! Command line entry points and the HTTP session server for the bus
//! navigation engine.

pub mod cli;
pub mod server;
