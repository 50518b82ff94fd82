//! Floating-point abstraction shared by the numeric modules.
//!
//! Everything that does arithmetic on embeddings, salience scores or
//! projections is written against [`Scalar`] so the same code runs in `f32`
//! (compact, matches the on-disk embedding rows) or `f64` (the default used by
//! the pipeline and the oracle tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type usable by the audit metrics.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal or intermediate into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    /// Converts a count into this type.
    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Converts from the `f32` storage format used by embedding files.
    #[inline]
    fn from_f32_lossless(x: f32) -> Self {
        Self::lit(f64::from(x))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances_agree_across_precisions() {
        let a64 = [0.0f64, 3.0];
        let b64 = [4.0f64, 0.0];
        assert_eq!(dist(&a64, &b64), 5.0);
        let a32 = [0.0f32, 3.0];
        let b32 = [4.0f32, 0.0];
        assert_eq!(dist(&a32, &b32), 5.0);
        assert_eq!(f32::from_f32_lossless(0.25).as_f64(), 0.25);
    }
}
