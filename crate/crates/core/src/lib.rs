pub mod archive;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feature_transform;
pub mod image_io;
pub mod network;
pub mod nn;
pub mod temporal;
pub mod stylize;
pub mod train;

pub use error::{Error, Result};
