//! Scalar abstraction over the floating-point type used by the numeric core.
//!
//! Every simulation, training and verification kernel in this crate is
//! generic over [`Scalar`], so the same code runs in `f32` or `f64`.
//! Concrete aliases for the flagship types live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::ScalarOperand;
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable by every numeric kernel in the crate.
///
/// Adds RNG sampling hooks and lossless `f64` round-tripping on top of the
/// `num_traits` float stack. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for representable values).
    fn from_f64(v: f64) -> Self;
    /// Widening conversion to `f64` (exact for `f32` and `f64`).
    fn to_f64(self) -> f64;
    /// One standard normal draw from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One uniform draw in `[0, 1)` from `rng`.
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Shorthand for `T::from_f64(v)` at call sites with literals.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
