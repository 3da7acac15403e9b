pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod splitter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
