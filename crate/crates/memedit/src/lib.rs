//! File formats, configuration and the command line around `memedit-core`.

pub mod checkpoint;
pub mod cli;
pub mod codebook_file;
pub mod config;
pub mod corpus_file;
mod error;
pub mod header;
pub mod report_file;

pub use error::{FormatError, Result};
