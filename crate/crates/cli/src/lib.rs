//! Experiment orchestration for the `rmldp` binary.

pub mod config;
pub mod pipeline;
pub mod verify;
