//! Std companion to `lmplab-core`: file formats, run configuration,
//! thread-pool drivers, the experiment pipeline, and the `lmplab` CLI.

pub mod cli;
pub mod config;
pub mod format;
pub mod parallel;
pub mod run;

pub use lmplab_core as core;

pub const TOOL_VERSION: &str = concat!("lmplab ", env!("CARGO_PKG_VERSION"));
