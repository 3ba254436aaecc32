pub mod cli;
pub mod data;
pub mod dsf;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod posterior;
pub mod results;
pub mod sampler;
pub mod simulator;
pub mod sparse;

pub use error::{Error, Result};
