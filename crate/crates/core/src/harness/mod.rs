//! Configuration, experiment orchestration, metrics and file output.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod report;
