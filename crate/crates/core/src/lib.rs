//! Discrete-event simulation of an orchestrated cluster running a stateful
//! streaming service, an active/standby state controller for it, and an
//! experiment harness for failover and scaling measurements.

pub mod cluster;
pub mod controller;
pub mod engine;
pub mod error;
pub mod events;
pub mod harness;
pub mod workload;
pub mod world;

pub use engine::{Engine, RandomSource, SimTime, Stop, Trace};
pub use events::{Event, HaState};
