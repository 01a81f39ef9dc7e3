pub mod data;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
