pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
mod io_util;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
