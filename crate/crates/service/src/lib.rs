//! Runs the negotiation stack: a fixed-rate simulation loop, scripted
//! scenarios for offline comparison, and a WebSocket server for live
//! operator consoles.

pub mod engine;
pub mod protocol;
pub mod scenario;
pub mod server;
