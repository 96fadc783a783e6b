//! Training, decoding and evaluation on top of `s2t-core`, plus the on-disk formats.

pub mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod lmfile;
pub mod train;
pub mod translate;
pub mod wav;

pub use error::{exit_code, FormatError, UsageError};
