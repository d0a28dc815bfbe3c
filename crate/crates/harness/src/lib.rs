//! Benchmark harness for GP-surrogate ABC: simulators with reference
//! posteriors, the sequential inference loop, TV tracking and result files.

pub mod benchmark;
pub mod config;
pub mod error;
pub mod io;
pub mod runner;
pub mod simulators;
pub mod threshold;
pub mod tv;

pub use config::{BenchmarkConfig, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use runner::{run_inference, ExperimentResult, ReferenceCache};
