pub mod augmentation;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod objective;
pub mod raster;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
