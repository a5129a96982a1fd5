//! Cache-bound performance analysis: an analytic model relating operator run
//! time to per-level memory bandwidth, reference kernels to measure against,
//! and the tooling to benchmark, classify and report.

pub mod bitserial;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod kernels;
pub mod microbench;
pub mod model;
pub mod report;
pub mod workloads;

pub use error::{Error, Result};
