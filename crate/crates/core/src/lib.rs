pub mod cli;
pub mod data;
pub mod envs;
pub mod error;
pub mod lm;
pub mod lora;
pub mod model;
pub mod params;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
