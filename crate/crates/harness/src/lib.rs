//! Library side of the `sdt` command: synthetic data, run configs,
//! training runs and the diagnostic commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod runner;

pub use config::{Precision, RunConfig};
pub use data::{Dataset, SyntheticTask};
pub use error::Failure;
pub use runner::{train, RunOutcome, RunRecord};
