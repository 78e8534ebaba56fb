//! Library surface of the CLI so integration tests can drive whole runs
//! in-process.

pub mod config;
pub mod manifest;
pub mod stages;
