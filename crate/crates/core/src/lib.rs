//! Numeric core of the tiled diffusion upsampler: tensors, imaging, block
//! geometry and scheduling, the transformer with unidirectional block
//! attention, semantic conditioning and the EDM diffusion machinery.
//! `no_std` with `alloc`.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod semantic;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
