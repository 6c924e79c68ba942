//! File formats, the experiment runner and the `lecnet` command line for
//! [`lecnet_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod runs;

pub use error::{LabError, LabResult};
