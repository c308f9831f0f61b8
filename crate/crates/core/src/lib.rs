pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod losses;
pub mod nn;
pub mod pcr;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
