pub mod cli;
pub mod csbm;
pub mod diffmath;
pub mod error;
pub mod graphcore;
pub mod posterior;
pub mod robustness;
pub mod s2net;
pub mod sparsecode;
pub mod training;

pub use error::{Error, Result};
