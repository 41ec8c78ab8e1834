//! Scalar abstraction for the numeric kernels.
//!
//! Link functions, likelihoods, the Newton solver and the hierarchical
//! log-posterior are written against [`Real`] so they can be instantiated
//! for `f32` or `f64`. Special functions that only exist for `f64`
//! (incomplete beta, log-gamma, normal quantiles) round-trip through `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    /// `ln(2π)`.
    #[inline]
    fn ln_two_pi() -> Self {
        Self::lit(1.837_877_066_409_345_5)
    }
}

impl Real for f32 {}
impl Real for f64 {}
