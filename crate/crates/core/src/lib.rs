//! Benchmark framework for data reconstruction attacks against image
//! classifiers.

pub mod attacks;
pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod harness;
pub mod judge;
pub mod knowledge;
pub mod memorization;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod result;
pub mod tensor;

pub use error::{Error, Result};
