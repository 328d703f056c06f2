pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod draw;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
