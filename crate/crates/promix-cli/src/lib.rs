//! Experiment harness library behind the `promix` binary: configuration
//! files, run/sweep execution, CSV reports and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod csvout;
pub mod runner;
