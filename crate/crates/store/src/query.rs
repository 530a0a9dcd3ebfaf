//! Query request and response types shared by the CLI and the HTTP service.

use std::fmt::Write as _;

use latsim_core::extraction::LayerGroup;
use latsim_core::similarity::WeightProvenance;
use serde::{Deserialize, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipKind {
    Gaussian,
    #[serde(alias = "trapezoid")]
    Trapezoidal,
}

impl std::str::FromStr for MembershipKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "trapezoid" | "trapezoidal" => Ok(Self::Trapezoidal),
            other => Err(format!("unknown membership function `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Uniform,
    /// The session's weights from the last cluster recompute.
    #[serde(alias = "cluster")]
    ClusterDiff,
    Svd,
    /// One weight per retained feature; normalized before use.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub membership: MembershipKind,
    pub tau: f64,
    pub query_ids: Vec<u64>,
    #[serde(default)]
    pub weights: WeightMode,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Score only retained features from this layer group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_group: Option<LayerGroup>,
}

fn default_top_k() -> usize {
    10
}

impl QueryRequest {
    pub fn gaussian(query: u64, tau: f64, top_k: usize) -> Self {
        Self {
            membership: MembershipKind::Gaussian,
            tau,
            query_ids: vec![query],
            weights: WeightMode::Uniform,
            top_k,
            layer_group: None,
        }
    }

    pub fn trapezoidal(queries: Vec<u64>, tau: f64, top_k: usize) -> Self {
        Self {
            membership: MembershipKind::Trapezoidal,
            tau,
            query_ids: queries,
            weights: WeightMode::Uniform,
            top_k,
            layer_group: None,
        }
    }

    pub fn with_weights(mut self, weights: WeightMode) -> Self {
        self.weights = weights;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub rank: usize,
    pub object_id: u64,
    #[serde(serialize_with = "nine_significant")]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Relative URL of the thumbnail, if the bundle has one.
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<ResultRow>,
    pub weights: WeightProvenance,
    /// The weights were computed from an older cluster revision.
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Number of features that entered the score.
    pub features: usize,
    pub request: QueryRequest,
}

pub fn round_significant(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

fn nine_significant<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_significant(*x, 9))
}

pub const CSV_HEADER: &str = "rank,object_id,score";

impl QueryResponse {
    /// `rank,object_id,score` with scores printed to 9 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.results.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            let _ = writeln!(out, "{},{},{:.9}", r.rank, r.object_id, r.score);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("response serializes")
    }
}
