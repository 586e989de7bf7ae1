//! Element trait shared by the 32-bit training path and the 64-bit
//! verification path.

use num_traits::Float;

pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for writing literals in generic numeric code.
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
