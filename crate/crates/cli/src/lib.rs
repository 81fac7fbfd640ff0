//! Command-line front end: configuration, stage orchestration, manifests.
//!
//! The binary built from this crate is `ncd`; everything here is also a
//! library so integration tests can drive stages in-process.

pub mod config;
pub mod manifest;
pub mod stages;
