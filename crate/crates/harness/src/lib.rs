//! Configuration, persistence, CSV reports and experiment drivers for
//! `ecoprune-core`.

pub mod archive;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;

pub use config::RunConfig;
