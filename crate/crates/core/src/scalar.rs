//! Floating-point scalar abstraction shared by every numerical kernel.
//!
//! The samplers, densities and summaries are written once against [`Real`]
//! and instantiated for `f64` (the default used by the CLI and the file
//! formats) and `f32`.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Open01, StandardNormal};

/// Real scalar usable by the linear algebra (via `nalgebra::RealField`), by
/// the text formats (`Display`/`FromStr` round-trip exactly) and by the
/// random variate generators.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + FromStr + Send + Sync + 'static
{
    /// Positive infinity.
    fn inf() -> Self;

    /// Machine epsilon.
    fn eps() -> Self;

    /// Smallest value strictly greater than `self` (for finite `self`).
    fn next_up(self) -> Self;

    fn finite(self) -> bool;

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform draw on the open interval (0, 1).
    fn open01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Gamma draw with the given shape and *scale*. Parameters are validated
    /// by the caller.
    fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: Self, scale: Self) -> Self;

    fn beta<R: Rng + ?Sized>(rng: &mut R, a: Self, b: Self) -> Self;

    /// Lossy conversion used for literals and counts.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn inf() -> Self {
                <$t>::INFINITY
            }

            #[inline]
            fn eps() -> Self {
                <$t>::EPSILON
            }

            #[inline]
            fn next_up(self) -> Self {
                <$t>::next_up(self)
            }

            #[inline]
            fn finite(self) -> bool {
                <$t>::is_finite(self)
            }

            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            #[inline]
            fn open01<R: Rng + ?Sized>(rng: &mut R) -> Self {
                Open01.sample(rng)
            }

            #[inline]
            fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: Self, scale: Self) -> Self {
                Gamma::new(shape, scale)
                    .expect("gamma parameters validated by caller")
                    .sample(rng)
            }

            #[inline]
            fn beta<R: Rng + ?Sized>(rng: &mut R, a: Self, b: Self) -> Self {
                Beta::new(a, b)
                    .expect("beta parameters validated by caller")
                    .sample(rng)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
