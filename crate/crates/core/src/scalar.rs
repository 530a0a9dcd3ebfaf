use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used throughout the numeric modules.
///
/// Implemented for `f32` and `f64`. The pipeline runs in `f64`; `f32` is
/// the on-disk blob precision and is handy for memory-bound experiments.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Machine epsilon scaled for convergence tests in iterative routines.
    fn tolerance() -> Self;

    /// IEEE total order, for sorting.
    fn cmp_total(&self, other: &Self) -> std::cmp::Ordering;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn tolerance() -> Self {
        f32::EPSILON
    }

    fn cmp_total(&self, other: &Self) -> std::cmp::Ordering {
        f32::total_cmp(self, other)
    }
}

impl Scalar for f64 {
    fn tolerance() -> Self {
        f64::EPSILON
    }

    fn cmp_total(&self, other: &Self) -> std::cmp::Ordering {
        f64::total_cmp(self, other)
    }
}
