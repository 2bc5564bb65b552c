//! File formats, checkpoints, reports and the pipeline commands behind the
//! `difftt` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
