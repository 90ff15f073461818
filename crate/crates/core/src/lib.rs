//! Learning locational marginal prices from dc optimal power flow.
//!
//! This crate is `no_std` (it needs `alloc`) and holds the numerical parts of
//! the pipeline: grid matrices and injection shift factors, an interior-point
//! dc-OPF solver that reports the duals behind nodal prices, scenario
//! sampling, a small graph-filter neural network engine with hand-written
//! gradients, the feasibility-regularized training loop, and the topology
//! transfer protocol. File formats, threading, and the CLI live in the
//! `lmplab` crate.
#![no_std]

extern crate alloc;

pub mod dataset;
pub mod dcopf;
mod error;
pub mod grid;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use grid::{Edge, Grid, IsfMatrix};
