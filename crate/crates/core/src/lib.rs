//! Optical-SAR ship re-identification.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod dfl;
pub mod error;
pub mod eval;
pub mod losses;
pub mod scl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
