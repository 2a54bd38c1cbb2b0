pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod partition;
pub mod pff;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
