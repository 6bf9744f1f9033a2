//! Library surface of the `romrl` driver: configuration loading, artifact
//! persistence, and the command implementations, shared with the
//! integration tests.

pub mod artifacts;
pub mod commands;
pub mod config;
