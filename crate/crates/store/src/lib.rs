//! On-disk feature bundles, persistent sessions and cluster curation.
//!
//! A session is created from a bundle with [`Session::ingest`], then moves
//! through [`Session::extract`] and [`Session::prune`] before it can answer
//! queries. Sessions persist to a single checksummed file.

pub mod bundle;
pub mod checksum;
pub mod clusters;
pub mod error;
pub mod query;
pub mod session;
pub mod synth;

pub use bundle::{BundleWriter, FeatureBundle, Manifest, ObjectEntry};
pub use clusters::{ClusterOp, ClusterStore, ClusterView};
pub use error::{Result, StoreError};
pub use query::{MembershipKind, QueryRequest, QueryResponse, ResultRow, WeightMode};
pub use session::{ReportGrouping, Session, SessionStatus, WeightMethod};
pub use synth::{synth_bundle, SynthOptions};

/// Loads and fully validates a bundle directory.
pub fn load_bundle(path: impl AsRef<std::path::Path>) -> Result<FeatureBundle> {
    FeatureBundle::load(path)
}
