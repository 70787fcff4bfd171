//! Out-of-distribution benchmarking for sensor-based activity recognition.

pub mod algorithms;
pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod runner;
pub mod scenario;

pub use error::{HaroodError, Result};
