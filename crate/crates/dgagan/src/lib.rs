//! File formats, training runs, evaluation reports and the command line
//! around `dgagan-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod lvol;
pub mod manifest;
pub mod report;
pub mod run;

pub use error::{Error, FormatError, Result};
