//! File formats, run manifests and the command-line front end for [`krr_core`].

pub mod cli;
pub mod error;
pub mod io;
pub mod jobs;
pub mod manifest;
pub mod model;

pub use error::{CliError, Result};
pub use krr_core as core;
