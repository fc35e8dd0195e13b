pub mod allocation;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod lora;
pub mod model;
pub mod routing;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
