//! Batch front end: configuration, synthesis, simulation and verification
//! commands shared by the `lpvsync` binary and its tests.

pub mod commands;
pub mod config;
