//! Std companion of `triview-core`: binary file formats, IDX ingestion,
//! rayon-parallel moment passes and the experiment CLI.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod parallel;

pub use error::{Error, Result};
pub use triview_core as core;
