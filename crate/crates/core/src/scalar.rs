use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FloatConst};

/// Floating point element type. The model and every numeric routine are
/// generic over this, which is how the 32/64-bit precision switch works.
pub trait Scalar:
    Float + FloatConst + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Runtime precision selector used by front ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
