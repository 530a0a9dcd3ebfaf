//! Weighted probabilistic similarity, feature weights and ranking.
//!
//! Scores are `sum_j w_j * g_j` with `sum_j w_j = 1`, so uniform weights give
//! the plain mean grade and every score lies in `[0, 1]`.

use std::collections::BTreeSet;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{FuzzyPattern, MembershipKernel, MembershipSpec};
use crate::linalg::{ColumnStats, Matrix};
use crate::Scalar;

/// Normalization tolerance for weight vectors.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

const PARALLEL_MIN_CELLS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightProvenance {
    Uniform,
    ClusterDiff,
    Svd,
    Explicit,
}

impl WeightProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::ClusterDiff => "cluster_diff",
            Self::Svd => "svd",
            Self::Explicit => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T> {
    weights: Vec<T>,
    provenance: WeightProvenance,
}

impl<T: Scalar> WeightVector<T> {
    /// Accepts already-normalized, non-negative weights.
    pub fn new(weights: Vec<T>, provenance: WeightProvenance) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("weight vector is empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        let sum: T = weights.iter().copied().sum();
        if (sum - T::one()).abs().to_f64_lossy() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights, provenance })
    }

    /// Normalizes non-negative raw weights to unit sum.
    pub fn from_raw(raw: Vec<T>, provenance: WeightProvenance) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Shape("weight vector is empty".into()));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        let sum: T = raw.iter().copied().sum();
        if sum <= T::zero() {
            return Err(Error::DegenerateWeights("raw weights sum to zero".into()));
        }
        Ok(Self {
            weights: raw.into_iter().map(|w| w / sum).collect(),
            provenance,
        })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn provenance(&self) -> WeightProvenance {
        self.provenance
    }

    /// Restricts to a subset of features and renormalizes.
    pub fn select(&self, features: &[usize]) -> Result<Self> {
        Self::from_raw(features.iter().map(|&j| self.weights[j]).collect(), self.provenance)
    }
}

pub fn uniform_weights<T: Scalar>(n: usize) -> Result<WeightVector<T>> {
    if n == 0 {
        return Err(Error::Shape("uniform weights need n >= 1".into()));
    }
    let w = T::one() / T::from_usize_lossy(n);
    Ok(WeightVector {
        weights: vec![w; n],
        provenance: WeightProvenance::Uniform,
    })
}

/// Weights proportional to `|loading|` of the retained features.
pub fn weights_from_svd<T: Scalar>(retained_loadings: &[T]) -> Result<WeightVector<T>> {
    WeightVector::from_raw(
        retained_loadings.iter().map(|v| v.abs()).collect(),
        WeightProvenance::Svd,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub members: BTreeSet<usize>,
}

impl Cluster {
    pub fn new(name: impl Into<String>, members: impl IntoIterator<Item = usize>) -> Self {
        Self {
            name: name.into(),
            members: members.into_iter().collect(),
        }
    }
}

/// Practitioner-defined groups of similar objects. Clusters may overlap.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
}

impl ClusterSet {
    pub fn new(clusters: Vec<Cluster>) -> Self {
        Self { clusters }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.name == name)
    }

    pub fn validate(&self, objects: usize, min_size: usize) -> Result<()> {
        for c in &self.clusters {
            if c.members.len() < min_size.max(1) {
                return Err(Error::ClusterTooSmall {
                    name: c.name.clone(),
                    size: c.members.len(),
                    min: min_size.max(1),
                });
            }
            if let Some(&bad) = c.members.iter().find(|&&i| i >= objects) {
                return Err(Error::Query(format!("cluster `{}` has unknown object {bad}", c.name)));
            }
        }
        Ok(())
    }

    /// Component-wise mean feature vector of every cluster.
    pub fn means<T: Scalar>(&self, x: &Matrix<T>) -> Vec<Vec<T>> {
        self.clusters
            .iter()
            .map(|c| {
                let mut mean = vec![T::zero(); x.cols()];
                for &i in &c.members {
                    for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                        *m = *m + v;
                    }
                }
                let n = T::from_usize_lossy(c.members.len());
                mean.iter_mut().for_each(|m| *m = *m / n);
                mean
            })
            .collect()
    }
}

/// Per-feature sum of `|mean_a - mean_b|` over unordered cluster pairs.
pub fn cluster_difference_sums<T: Scalar>(clusters: &ClusterSet, x: &Matrix<T>, min_size: usize) -> Result<Vec<T>> {
    if clusters.len() < 2 {
        return Err(Error::InsufficientClusters(clusters.len()));
    }
    clusters.validate(x.rows(), min_size)?;
    let means = clusters.means(x);
    let mut sums = vec![T::zero(); x.cols()];
    for a in 0..means.len() {
        for b in (a + 1)..means.len() {
            for (s, (&ma, &mb)) in sums.iter_mut().zip(means[a].iter().zip(&means[b])) {
                *s = *s + (ma - mb).abs();
            }
        }
    }
    Ok(sums)
}

/// Feature weights from cluster mean differences, normalized to unit sum.
pub fn weights_from_clusters<T: Scalar>(clusters: &ClusterSet, x: &Matrix<T>, min_size: usize) -> Result<WeightVector<T>> {
    let sums = cluster_difference_sums(clusters, x, min_size)?;
    WeightVector::from_raw(sums, WeightProvenance::ClusterDiff).map_err(|e| match e {
        Error::DegenerateWeights(_) => Error::DegenerateWeights("cluster means are identical".into()),
        other => other,
    })
}

pub fn similarity_score<T: Scalar>(pattern: &FuzzyPattern<T>, w: &WeightVector<T>) -> Result<T> {
    if pattern.grades.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} grades for {} weights",
            pattern.grades.len(),
            w.len()
        )));
    }
    Ok(weighted_sum(&pattern.grades, w.as_slice()))
}

/// Sum in index order. Scores divide by it so that all-ones grades give
/// exactly 1 despite rounding in the normalized weights.
#[inline]
fn weight_total<T: Scalar>(weights: &[T]) -> T {
    weights.iter().fold(T::zero(), |acc, &w| acc + w)
}

#[inline]
fn weighted_sum<T: Scalar>(grades: &[T], weights: &[T]) -> T {
    let s = grades
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (&g, &w)| acc + w * g);
    (s / weight_total(weights)).max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry<T> {
    pub object: usize,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult<T> {
    pub entries: Vec<RankedEntry<T>>,
    pub spec: MembershipSpec<T>,
    pub weights: WeightProvenance,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

/// Scores every object against the query and returns the `top_k` best.
///
/// Order is by descending score, ties by ascending object index.
pub fn rank_objects<T: Scalar>(
    x: &Matrix<T>,
    stats: &ColumnStats<T>,
    spec: &MembershipSpec<T>,
    w: &WeightVector<T>,
    top_k: usize,
) -> Result<RankedResult<T>> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    if w.len() != x.cols() {
        return Err(Error::Shape(format!("{} weights for {} features", w.len(), x.cols())));
    }
    let kernel = MembershipKernel::prepare(x, stats, spec)?;
    let weights = w.as_slice();
    let total = weight_total(weights);
    let score_row = |(object, row): (usize, &[T])| {
        let s = row
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (j, &v)| acc + weights[j] * kernel.grade(j, v));
        RankedEntry {
            object,
            score: (s / total).max(T::zero()).min(T::one()),
        }
    };
    let mut entries: Vec<RankedEntry<T>> = if x.rows() * x.cols() >= PARALLEL_MIN_CELLS {
        x.as_slice()
            .par_chunks(x.cols().max(1))
            .enumerate()
            .map(score_row)
            .collect()
    } else {
        x.row_iter().enumerate().map(score_row).collect()
    };
    entries.sort_by(|a, b| b.score.cmp_total(&a.score).then(a.object.cmp(&b.object)));
    entries.truncate(top_k);
    let timestamp_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    Ok(RankedResult {
        entries,
        spec: spec.clone(),
        weights: w.provenance(),
        timestamp_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShare<T> {
    pub tag: String,
    pub features: usize,
    pub raw_sum: T,
    pub percent: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<T> {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<T>,
    pub frequency: Vec<usize>,
    pub cumulative: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeChangeReport<T> {
    /// Raw per-feature cluster difference sums.
    pub per_feature: Vec<T>,
    pub groups: Vec<GroupShare<T>>,
    /// Distribution of per-feature sums scaled by their maximum.
    pub histogram: Histogram<T>,
}

pub const REPORT_BINS: usize = 10;

/// Cluster difference sums aggregated by a per-feature tag (layer or layer group).
pub fn magnitude_change_report<T: Scalar>(
    clusters: &ClusterSet,
    x: &Matrix<T>,
    tags: &[String],
    min_size: usize,
) -> Result<MagnitudeChangeReport<T>> {
    if tags.len() != x.cols() {
        return Err(Error::Shape(format!("{} tags for {} features", tags.len(), x.cols())));
    }
    let sums = cluster_difference_sums(clusters, x, min_size)?;
    let total: T = sums.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::DegenerateWeights("cluster means are identical".into()));
    }
    let mut groups: Vec<GroupShare<T>> = Vec::new();
    for (tag, &s) in tags.iter().zip(&sums) {
        match groups.iter_mut().find(|g| &g.tag == tag) {
            Some(g) => {
                g.raw_sum = g.raw_sum + s;
                g.features += 1;
            }
            None => groups.push(GroupShare {
                tag: tag.clone(),
                features: 1,
                raw_sum: s,
                percent: T::zero(),
            }),
        }
    }
    let hundred = T::from_f64_lossy(100.0);
    for g in &mut groups {
        g.percent = g.raw_sum / total * hundred;
    }

    let max = sums.iter().copied().fold(T::zero(), T::max);
    let bins = T::from_usize_lossy(REPORT_BINS);
    let mut frequency = vec![0usize; REPORT_BINS];
    for &s in &sums {
        let b = ((s / max) * bins).floor().to_usize().unwrap_or(0).min(REPORT_BINS - 1);
        frequency[b] += 1;
    }
    let cumulative = frequency
        .iter()
        .scan(0, |acc, &f| {
            *acc += f;
            Some(*acc)
        })
        .collect();
    let edges = (0..=REPORT_BINS).map(|k| T::from_usize_lossy(k) / bins).collect();
    Ok(MagnitudeChangeReport {
        per_feature: sums,
        groups,
        histogram: Histogram {
            edges,
            frequency,
            cumulative,
        },
    })
}
