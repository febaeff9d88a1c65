//! File formats and the command-line front end for `outdreamer-core`.
//!
//! - [`frames`]: numbered binary PPM (P6) frames plus a text manifest.
//! - [`checkpoint`]: model weights as little-endian `f64` arrays behind a
//!   length-prefixed text manifest.
//! - [`config`]: `key=value` training configuration files.
//! - [`commands`]: the subcommands behind the `outdreamer` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod frames;

pub use error::{CliError, CliResult};
