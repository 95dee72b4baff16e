//! Std-side companion to `fuselab-core`: experiment configuration files,
//! checkpoint/dataset persistence, CSV and SVG outputs with embedded resolved
//! configs, wall-clock latency measurement, and the batch CLI runner.

pub mod config;
pub mod csvout;
pub mod error;
pub mod io;
pub mod latency;
pub mod runner;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{ExitCode, LabError};
