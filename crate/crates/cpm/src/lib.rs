//! File formats, run orchestration and the command line for the
//! class-conditional prompting pipeline in `cpm-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod fsutil;
pub mod report;
pub mod run;
pub mod wav;

pub use error::{Error, Result};
