pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
