//! File formats, parallel drivers and the command-line front end for
//! [`crane_core`].

pub mod archive;
pub mod cli;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use error::{AppError, Result};
