//! Experiment drivers, run reports and the subprocess model client behind the
//! `quadcal` command.

pub mod config;
pub mod experiments;
pub mod protocol;
pub mod report;
