//! Training loop, sweeps, datasets, record files and the verification
//! suite for the `modnorm` library.

pub mod config;
pub mod data;
pub mod error;
pub mod records;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use records::RunRecord;
