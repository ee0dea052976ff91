use alloc::string::String;

use crate::geometry::BlockCoord;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dimensions not divisible: {0}")]
    Indivisible(String),
    #[error("cache entry {0:?} was already evicted")]
    CacheEvicted(BlockCoord),
    #[error("cache entry {0:?} is absent")]
    CacheAbsent(BlockCoord),
    #[error("cache entry {0:?} already present")]
    CacheOccupied(BlockCoord),
    #[error("position {0} outside rotary table of {1} entries")]
    RopeRange(usize, usize),
    #[error("embedding has zero norm")]
    ZeroNorm,
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
