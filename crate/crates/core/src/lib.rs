//! Similarity search over activation magnitudes of a trained fully
//! convolutional network.
//!
//! The pipeline: [`extraction`] reduces per-object feature maps to an
//! activation matrix, [`pruning`] keeps the features that carry most of its
//! energy along the leading singular direction, [`fuzzy`] turns normalized
//! magnitudes into membership grades relative to a query, and [`similarity`]
//! aggregates grades into weighted scores and ranks objects. [`sparse`]
//! holds the channel-sparsity training objective used to make the feature
//! space compact in the first place.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the `*64`/`*32`
//! aliases below name the common instantiations.

pub mod error;
pub mod extraction;
pub mod fuzzy;
pub mod linalg;
pub mod pruning;
mod scalar;
pub mod similarity;
pub mod sparse;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type SvdResult64 = linalg::SvdResult<f64>;
pub type ColumnStats64 = linalg::ColumnStats<f64>;
pub type PrunedMatrix64 = pruning::PrunedMatrix<f64>;
pub type MembershipSpec64 = fuzzy::MembershipSpec<f64>;
pub type FuzzyPattern64 = fuzzy::FuzzyPattern<f64>;
pub type WeightVector64 = similarity::WeightVector<f64>;
pub type RankedResult64 = similarity::RankedResult<f64>;
pub type LayerMaps32 = extraction::LayerMaps<f32>;
pub type LayerMaps64 = extraction::LayerMaps<f64>;
pub type Tensor64 = sparse::Tensor3<f64>;
pub type ToyNet64 = sparse::ToyNet<f64>;
