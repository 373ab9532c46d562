//! Library side of the `rec` binary: config parsing, experiment runs and reports.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;
