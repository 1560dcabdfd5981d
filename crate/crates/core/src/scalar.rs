//! Scalar abstraction for the numerical core.
//!
//! Everything downstream of data ingest (tensors, models, metrics) is
//! generic over [`Scalar`] so the same code runs in f32 or f64. The
//! crate-root aliases pin f64, which is what the pipeline uses.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn from_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize converts to scalar")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_for_f64() {
        assert_eq!(f64::from_f64(1.25), 1.25);
        assert_eq!(1.25f64.to_f64(), 1.25);
        assert_eq!(f64::from_usize(7), 7.0);
    }

    #[test]
    fn f32_narrowing_is_lossy_but_defined() {
        let x = f32::from_f64(0.1);
        assert!((x as f64 - 0.1).abs() < 1e-7);
    }
}
