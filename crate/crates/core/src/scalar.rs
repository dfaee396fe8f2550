//! Floating-point abstraction shared by the numeric kernels.
//!
//! Everything that is pure arithmetic (factorizations, least squares, the
//! LASSO path, kernel smoothers, meta-analytic statistics) is written against
//! [`Scalar`] so it runs in `f32` or `f64`. The data pipeline itself works in
//! `f64` through the aliases re-exported at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Relative tolerance used to declare a column aliased in rank-revealing
    /// factorizations. `1e-10` in double precision, looser for `f32`.
    fn alias_tol() -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn alias_tol() -> Self {
        1e-10
    }
}

impl Scalar for f32 {
    fn alias_tol() -> Self {
        // 100 ulp at 1.0; 1e-10 is below f32 resolution.
        1.2e-5
    }
}

/// Sum in index order. Kept as a named helper so the summation order used by
/// the estimators is explicit and shared.
pub fn ordered_sum<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |acc, x| acc + x)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
