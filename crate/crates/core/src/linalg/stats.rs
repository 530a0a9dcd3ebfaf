use serde::{Deserialize, Serialize};

use super::{Grid, Matrix};
use crate::error::{Error, Result};
use crate::Scalar;

/// Per-column summary statistics. `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> ColumnStats<T> {
    pub fn len(&self) -> usize {
        self.std.len()
    }

    pub fn is_empty(&self) -> bool {
        self.std.is_empty()
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        let pick = |v: &Vec<T>| cols.iter().map(|&c| v[c]).collect();
        Self {
            min: pick(&self.min),
            max: pick(&self.max),
            mean: pick(&self.mean),
            std: pick(&self.std),
        }
    }
}

pub fn column_stats<T: Scalar>(m: &Matrix<T>) -> ColumnStats<T> {
    let n = m.cols();
    let mut stats = ColumnStats {
        min: vec![T::infinity(); n],
        max: vec![T::neg_infinity(); n],
        mean: vec![T::zero(); n],
        std: vec![T::zero(); n],
    };
    if m.rows() == 0 {
        stats.min.fill(T::zero());
        stats.max.fill(T::zero());
        return stats;
    }
    let count = T::from_usize_lossy(m.rows());
    for row in m.row_iter() {
        for (j, &v) in row.iter().enumerate() {
            stats.min[j] = stats.min[j].min(v);
            stats.max[j] = stats.max[j].max(v);
            stats.mean[j] = stats.mean[j] + v;
        }
    }
    for mean in &mut stats.mean {
        *mean = *mean / count;
    }
    for row in m.row_iter() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - stats.mean[j];
            stats.std[j] = stats.std[j] + d * d;
        }
    }
    for (j, s) in stats.std.iter_mut().enumerate() {
        *s = (*s / count).sqrt();
        // the mean of a constant column can drift by an ulp; keep min <= mean <= max
        stats.mean[j] = stats.mean[j].max(stats.min[j]).min(stats.max[j]);
    }
    stats
}

/// Min-max scales every column to `[0, 1]`; constant columns become zeros.
///
/// The returned statistics describe the normalized columns.
pub fn normalize_columns<T: Scalar>(m: &Matrix<T>) -> (Matrix<T>, ColumnStats<T>) {
    let raw = column_stats(m);
    let mut out = m.clone();
    let cols = m.cols();
    for i in 0..m.rows() {
        for j in 0..cols {
            let range = raw.max[j] - raw.min[j];
            let v = &mut out[(i, j)];
            *v = if range > T::zero() {
                ((*v - raw.min[j]) / range).max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
        }
    }
    let stats = column_stats(&out);
    (out, stats)
}

/// Arithmetic mean of `map` over the given pixel coordinates.
pub fn masked_mean<T, I>(map: &Grid<'_, T>, pixels: I) -> Result<T>
where
    T: Scalar,
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut sum = T::zero();
    let mut count = 0usize;
    for (r, c) in pixels {
        if r >= map.height || c >= map.width {
            return Err(Error::Bounds(format!(
                "pixel ({r}, {c}) outside {}x{} map",
                map.height, map.width
            )));
        }
        sum = sum + map.get(r, c);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / T::from_usize_lossy(count))
}
