//! Fuzzy membership grades of normalized activation magnitudes relative to
//! a single query (Gaussian) or a query set (trapezoid).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ColumnStats, Matrix};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MembershipSpec<T> {
    /// Bell centred on the query's magnitude, width `tau * sigma_j`.
    Gaussian { query: usize, tau: T },
    /// Plateau over the query set's range, ramps widened by `tau` of that range.
    Trapezoidal { queries: Vec<usize>, tau: T },
}

impl<T: Scalar> MembershipSpec<T> {
    pub fn gaussian(query: usize, tau: T) -> Result<Self> {
        let spec = Self::Gaussian { query, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn trapezoidal(queries: Vec<usize>, tau: T) -> Result<Self> {
        let spec = Self::Trapezoidal { queries, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { tau, .. } => check_gaussian_tau(*tau),
            Self::Trapezoidal { queries, tau } => {
                if queries.len() < 2 {
                    return Err(Error::Config(format!(
                        "trapezoidal membership needs at least 2 queries, got {}",
                        queries.len()
                    )));
                }
                check_trapezoid_tau(*tau)
            }
        }
    }

    pub fn queries(&self) -> &[usize] {
        match self {
            Self::Gaussian { query, .. } => std::slice::from_ref(query),
            Self::Trapezoidal { queries, .. } => queries,
        }
    }

    pub fn tau(&self) -> T {
        match self {
            Self::Gaussian { tau, .. } | Self::Trapezoidal { tau, .. } => *tau,
        }
    }

    pub fn map_queries(&self, f: impl Fn(usize) -> usize) -> Self {
        match self {
            Self::Gaussian { query, tau } => Self::Gaussian { query: f(*query), tau: *tau },
            Self::Trapezoidal { queries, tau } => Self::Trapezoidal {
                queries: queries.iter().map(|&q| f(q)).collect(),
                tau: *tau,
            },
        }
    }
}

fn check_gaussian_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("gaussian tau must be > 0, got {tau}")))
    }
}

fn check_trapezoid_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau >= T::zero() && tau <= T::one() {
        Ok(())
    } else {
        Err(Error::Config(format!("trapezoid tau must lie in [0, 1], got {tau}")))
    }
}

/// `exp(-((x - x_q) / (tau * sigma))^2)`; an exact-match indicator when `sigma == 0`.
pub fn gaussian_grade<T: Scalar>(x: T, x_q: T, sigma: T, tau: T) -> Result<T> {
    check_gaussian_tau(tau)?;
    if sigma < T::zero() {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(gaussian_unchecked(x, x_q, tau * sigma))
}

#[inline]
fn gaussian_unchecked<T: Scalar>(x: T, x_q: T, spread: T) -> T {
    if spread == T::zero() {
        return if x == x_q { T::one() } else { T::zero() };
    }
    let d = (x - x_q) / spread;
    (-(d * d)).exp()
}

/// Four-sided trapezoid: 1 on `[x_a, x_b]`, linear ramps out to
/// `x_a - delta` and `x_b + delta` with `delta = tau * (x_b - x_a)`, 0 beyond.
pub fn trapezoidal_grade<T: Scalar>(x: T, x_a: T, x_b: T, tau: T) -> Result<T> {
    check_trapezoid_tau(tau)?;
    if x_a > x_b {
        return Err(Error::Config(format!("support [{x_a}, {x_b}] is reversed")));
    }
    Ok(trapezoid_unchecked(x, x_a, x_b, tau * (x_b - x_a)))
}

#[inline]
fn trapezoid_unchecked<T: Scalar>(x: T, a: T, b: T, delta: T) -> T {
    if x >= a && x <= b {
        return T::one();
    }
    if delta <= T::zero() {
        return T::zero();
    }
    let (lo, hi) = (a - delta, b + delta);
    if x > lo && x < a {
        (x - lo) / (a - lo)
    } else if x > b && x < hi {
        (hi - x) / (hi - b)
    } else {
        T::zero()
    }
}

/// Membership function resolved against a matrix: per-feature centres and
/// spreads, ready to grade any row.
#[derive(Debug, Clone)]
pub enum MembershipKernel<T> {
    Gaussian { centre: Vec<T>, spread: Vec<T> },
    Trapezoidal { lower: Vec<T>, upper: Vec<T>, delta: Vec<T> },
}

impl<T: Scalar> MembershipKernel<T> {
    pub fn prepare(x: &Matrix<T>, stats: &ColumnStats<T>, spec: &MembershipSpec<T>) -> Result<Self> {
        spec.validate()?;
        if stats.len() != x.cols() {
            return Err(Error::Shape(format!(
                "{} column stats for {} columns",
                stats.len(),
                x.cols()
            )));
        }
        if let Some(&q) = spec.queries().iter().find(|&&q| q >= x.rows()) {
            return Err(Error::Query(format!("unknown query row {q} (have {})", x.rows())));
        }
        Ok(match spec {
            MembershipSpec::Gaussian { query, tau } => Self::Gaussian {
                centre: x.row(*query).to_vec(),
                spread: stats.std.iter().map(|&s| *tau * s).collect(),
            },
            MembershipSpec::Trapezoidal { queries, tau } => {
                let mut lower = x.row(queries[0]).to_vec();
                let mut upper = lower.clone();
                for &q in &queries[1..] {
                    for (j, &v) in x.row(q).iter().enumerate() {
                        lower[j] = lower[j].min(v);
                        upper[j] = upper[j].max(v);
                    }
                }
                let delta = lower.iter().zip(&upper).map(|(&a, &b)| *tau * (b - a)).collect();
                Self::Trapezoidal { lower, upper, delta }
            }
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Gaussian { centre, .. } => centre.len(),
            Self::Trapezoidal { lower, .. } => lower.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn grade(&self, j: usize, x: T) -> T {
        match self {
            Self::Gaussian { centre, spread } => gaussian_unchecked(x, centre[j], spread[j]),
            Self::Trapezoidal { lower, upper, delta } => trapezoid_unchecked(x, lower[j], upper[j], delta[j]),
        }
    }

    pub fn grade_row(&self, row: &[T]) -> Vec<T> {
        row.iter().enumerate().map(|(j, &x)| self.grade(j, x)).collect()
    }
}

/// Grades of one object relative to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyPattern<T> {
    pub object: usize,
    pub grades: Vec<T>,
}

/// Grades every object of a column-normalized matrix.
pub fn fuzzify<T: Scalar>(x: &Matrix<T>, stats: &ColumnStats<T>, spec: &MembershipSpec<T>) -> Result<Vec<FuzzyPattern<T>>> {
    let kernel = MembershipKernel::prepare(x, stats, spec)?;
    Ok(x
        .row_iter()
        .enumerate()
        .map(|(object, row)| FuzzyPattern {
            object,
            grades: kernel.grade_row(row),
        })
        .collect())
}
