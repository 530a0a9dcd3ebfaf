//! Dense matrix primitives, column statistics and singular value decomposition.

mod matrix;
mod stats;
mod svd;

pub use matrix::{Grid, Matrix};
pub use stats::{column_stats, masked_mean, normalize_columns, ColumnStats};
pub use svd::{svd_decompose, SvdResult, MAX_SWEEPS};
