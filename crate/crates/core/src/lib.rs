#![no_std]
// `num_traits::Float` supplies float math; once std is anywhere in the build
// graph the inherent methods shadow it, hence the per-import allows

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod hmm;
pub mod learning;
pub mod linalg;
pub mod data;
pub mod decomposition;
pub mod matching;
pub mod models;
pub mod moments;
pub mod risk;
pub mod sample;
mod serde_mat;

pub use error::{Error, Result, Stage};
