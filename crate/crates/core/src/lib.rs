//! Gain-scheduled H-infinity consensus synchronization for networks of
//! parameter-varying agents.

pub mod archive;
pub mod chaos;
pub mod fixtures;
pub mod graph;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod scheduling;
pub mod simulation;
