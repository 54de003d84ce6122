pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod locmap;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
