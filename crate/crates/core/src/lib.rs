//! Smart-meter mesh simulator with collaborative integrity defence.

pub mod anomaly;
pub mod attacks;
pub mod journal;
pub mod protocol;
pub mod simnet;
pub mod store;
pub mod synth;
pub mod types;
