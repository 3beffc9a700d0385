//! Library side of the `aqpl` command: configuration, experiment
//! orchestration and the theory checks.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod theory;
