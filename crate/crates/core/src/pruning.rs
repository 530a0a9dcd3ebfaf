//! Feature ranking on the leading right singular vector and energy-based
//! retention of the top-ranked columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SvdResult};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking<T> {
    /// Feature indices, most relevant first.
    pub order: Vec<usize>,
    /// Absolute loading on the first right singular vector, per original feature.
    pub scores: Vec<T>,
}

/// Sorts features by descending `|loading|`; ties keep ascending index order.
pub fn rank_features<T: Scalar>(svd: &SvdResult<T>) -> FeatureRanking<T> {
    rank_by_loadings(svd.leading_right_vector())
}

pub fn rank_by_loadings<T: Scalar>(loadings: &[T]) -> FeatureRanking<T> {
    let scores: Vec<T> = loadings.iter().map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp_total(&scores[a]));
    FeatureRanking { order, scores }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedMatrix<T> {
    /// `objects x retained` columns of the input, in ascending column order.
    pub matrix: Matrix<T>,
    /// Original column ids, strictly increasing.
    pub retained: Vec<usize>,
    /// Fraction of total squared magnitude kept.
    pub variance_retained: T,
    pub ranking: FeatureRanking<T>,
}

/// Keeps the shortest ranking prefix whose squared column norms reach
/// `target` of the total. Zero columns are never kept.
pub fn prune_to_variance<T: Scalar>(x: &Matrix<T>, svd: &SvdResult<T>, target: T) -> Result<PrunedMatrix<T>> {
    if svd.vt.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "SVD has {} features, matrix has {}",
            svd.vt.cols(),
            x.cols()
        )));
    }
    let ranking = rank_features(svd);
    prune_with_ranking(x, ranking, target)
}

pub fn prune_with_ranking<T: Scalar>(x: &Matrix<T>, ranking: FeatureRanking<T>, target: T) -> Result<PrunedMatrix<T>> {
    if !(target > T::zero() && target <= T::one()) {
        return Err(Error::Config(format!("variance target {target} outside (0, 1]")));
    }
    let energy: Vec<T> = (0..x.cols()).map(|j| x.column_energy(j)).collect();
    // Summed in ranking order so a full prefix reproduces the total exactly.
    let total: T = ranking.order.iter().map(|&j| energy[j]).sum();
    if total <= T::zero() {
        return Err(Error::Numeric("activation matrix has no energy".into()));
    }
    let goal = target * total;
    let mut cumulative = T::zero();
    let mut retained = Vec::new();
    for &j in &ranking.order {
        if cumulative >= goal {
            break;
        }
        if energy[j] > T::zero() {
            cumulative = cumulative + energy[j];
            retained.push(j);
        }
    }
    retained.sort_unstable();
    Ok(PrunedMatrix {
        matrix: x.select_columns(&retained)?,
        retained,
        variance_retained: cumulative / total,
        ranking,
    })
}

/// Number of retained features per source layer.
pub fn retained_per_layer(retained: &[usize], column_layer: &[usize], layers: usize) -> Vec<usize> {
    let mut counts = vec![0; layers];
    for &j in retained {
        counts[column_layer[j]] += 1;
    }
    counts
}
