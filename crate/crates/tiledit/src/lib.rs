//! File formats, checkpoints, configuration, the upsampling engine and the
//! toy training loop on top of `tiledit-core`.

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod io;
pub mod textures;
pub mod train;

pub use error::{Error, Result};
