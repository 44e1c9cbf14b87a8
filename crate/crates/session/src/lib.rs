//! Configuration, persistence, experiment orchestration and the live console bridge.

pub mod bridge;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod protocol;
pub mod store;

pub use config::RunConfig;
pub use error::CliError;
