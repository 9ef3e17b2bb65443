//! Experiment orchestration for the dual-key backdoor laboratory: a flat
//! key=value config, hash-chained pipeline stages with content-addressed
//! artifacts, a grid sweep runner, and the weight-histogram defense driver.
//! The binary in `main.rs` is a thin argument layer over these modules, so
//! integration tests drive the same code paths as the CLI.

pub mod config;
pub mod stages;
pub mod sweep;
pub mod zoo;
