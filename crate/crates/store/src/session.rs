//! Session state and its single-file container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "LATSIMSS"
//! version     u32
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON
//! payload     f64 values of the activation matrix, row-major
//! checksum    u64 xxHash64 of every preceding byte
//! ```
//!
//! The normalized retained matrix and its column statistics are not stored;
//! they are re-derived on load, which is deterministic.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use latsim_core::extraction::{build_activation_matrix, column_origins, ColumnOrigin, ExtractOptions, LayerGroup};
use latsim_core::fuzzy::MembershipSpec;
use latsim_core::linalg::{normalize_columns, svd_decompose, ColumnStats, Matrix};
use latsim_core::pruning::{rank_by_loadings, prune_with_ranking};
use latsim_core::similarity::{
    magnitude_change_report, rank_objects, uniform_weights, weights_from_clusters, weights_from_svd, MagnitudeChangeReport,
    WeightProvenance, WeightVector,
};
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, Manifest};
use crate::checksum::checksum;
use crate::clusters::{ClusterOp, ClusterStore, ClusterView};
use crate::error::{Result, StoreError};
use crate::query::{MembershipKind, QueryRequest, QueryResponse, ResultRow, WeightMode};

pub const SESSION_MAGIC: &[u8; 8] = b"LATSIMSS";
pub const SESSION_FORMAT_VERSION: u32 = 1;
/// File name of the container inside a session directory.
pub const SESSION_FILE: &str = "session.lss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionState {
    pub options: ExtractOptions,
    pub origins: Vec<ColumnOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningState {
    pub target: f64,
    /// Retained column ids of the activation matrix, ascending.
    pub retained: Vec<usize>,
    pub variance_retained: f64,
    pub singular_values: Vec<f64>,
    /// First right singular vector, one loading per activation column.
    pub leading_loadings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub vector: WeightVector<f64>,
    /// Session revision at which the vector was computed.
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    #[serde(alias = "cluster_diff")]
    Eq5,
    Svd,
}

impl std::str::FromStr for WeightMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eq5" | "cluster" | "cluster_diff" => Ok(Self::Eq5),
            "svd" => Ok(Self::Svd),
            other => Err(format!("unknown weight method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportGrouping {
    Layer,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub bundle: PathBuf,
    pub objects: usize,
    pub layers: usize,
    pub extraction: Option<ExtractOptions>,
    pub features: Option<usize>,
    pub retained: Option<usize>,
    pub variance_target: Option<f64>,
    pub variance_retained: Option<f64>,
    pub revision: u64,
    pub cluster_revision: u64,
    pub weight_revision: Option<u64>,
    pub weights: Option<WeightProvenance>,
    pub stale: bool,
    pub warning: Option<String>,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    bundle_path: PathBuf,
    manifest: Manifest,
    revision: u64,
    /// `(rows, cols)` of the payload matrix.
    matrix_shape: Option<(usize, usize)>,
    extraction: Option<ExtractionState>,
    pruning: Option<PruningState>,
    clusters: ClusterStore,
    weights: Option<WeightState>,
}

#[derive(Debug, Clone)]
struct Derived {
    normalized: Matrix<f64>,
    stats: ColumnStats<f64>,
}

#[derive(Debug, Clone)]
pub struct Session {
    header: Header,
    matrix: Option<Matrix<f64>>,
    derived: Option<Derived>,
    rows: HashMap<u64, usize>,
}

impl Session {
    /// Starts a session on a bundle. The bundle is fully validated.
    pub fn ingest(bundle_path: impl AsRef<Path>) -> Result<Self> {
        let bundle = FeatureBundle::load(bundle_path.as_ref())?;
        let bundle_path = fs::canonicalize(bundle.root()).map_err(StoreError::io(bundle.root()))?;
        Ok(Self::from_header(
            Header {
                bundle_path,
                manifest: bundle.manifest().clone(),
                revision: 0,
                matrix_shape: None,
                extraction: None,
                pruning: None,
                clusters: ClusterStore::default(),
                weights: None,
            },
            None,
        ))
    }

    fn from_header(header: Header, matrix: Option<Matrix<f64>>) -> Self {
        let rows = header.manifest.objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
        Self {
            header,
            matrix,
            derived: None,
            rows,
        }
    }

    fn bump(&mut self) -> u64 {
        self.header.revision += 1;
        self.header.revision
    }

    pub fn bundle_path(&self) -> &Path {
        &self.header.bundle_path
    }

    pub fn manifest(&self) -> &Manifest {
        &self.header.manifest
    }

    pub fn object_ids(&self) -> Vec<u64> {
        self.header.manifest.objects.iter().map(|o| o.id).collect()
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.rows.get(&id).copied()
    }

    pub fn revision(&self) -> u64 {
        self.header.revision
    }

    pub fn activation_matrix(&self) -> Option<&Matrix<f64>> {
        self.matrix.as_ref()
    }

    pub fn extraction(&self) -> Option<&ExtractionState> {
        self.header.extraction.as_ref()
    }

    pub fn pruning(&self) -> Option<&PruningState> {
        self.header.pruning.as_ref()
    }

    pub fn weights(&self) -> Option<&WeightState> {
        self.header.weights.as_ref()
    }

    pub fn clusters(&self) -> &ClusterStore {
        &self.header.clusters
    }

    pub fn cluster_views(&self) -> Vec<ClusterView> {
        self.header.clusters.views()
    }

    /// Normalized retained features and their statistics.
    pub fn normalized(&self) -> Option<(&Matrix<f64>, &ColumnStats<f64>)> {
        self.derived.as_ref().map(|d| (&d.normalized, &d.stats))
    }

    pub fn set_cluster_policy(&mut self, min_size: usize, keep_empty: bool) {
        self.header.clusters.min_size = min_size.max(1);
        self.header.clusters.keep_empty = keep_empty;
    }

    /// Set iff the cluster set changed after the weights were computed.
    pub fn weights_stale(&self) -> bool {
        match &self.header.weights {
            Some(w) => self.header.clusters.revision > w.revision,
            None => false,
        }
    }

    /// Builds the activation matrix. Clears pruning and weights.
    pub fn extract(&mut self, options: ExtractOptions) -> Result<()> {
        let bundle = FeatureBundle::load(&self.header.bundle_path)?;
        if bundle.manifest() != &self.header.manifest {
            return Err(StoreError::Conflict(format!(
                "bundle at {} changed since ingest",
                self.header.bundle_path.display()
            )));
        }
        let matrix = build_activation_matrix(&bundle, options)?;
        log::info!("extracted {}x{} activation matrix", matrix.rows(), matrix.cols());
        self.header.extraction = Some(ExtractionState {
            options,
            origins: column_origins(&self.header.manifest.layers),
        });
        self.header.matrix_shape = Some(matrix.shape());
        self.header.pruning = None;
        self.header.weights = None;
        self.matrix = Some(matrix);
        self.derived = None;
        self.bump();
        Ok(())
    }

    /// Keeps the features carrying `target` of the activation energy and seeds uniform weights.
    pub fn prune(&mut self, target: f64) -> Result<&PruningState> {
        let matrix = self
            .matrix
            .as_ref()
            .ok_or_else(|| StoreError::Stage("run extract before prune".into()))?;
        let svd = svd_decompose(matrix)?;
        let loadings = svd.leading_right_vector().to_vec();
        let pruned = prune_with_ranking(matrix, rank_by_loadings(&loadings), target)?;
        log::info!(
            "retained {} of {} features ({:.4} of energy)",
            pruned.retained.len(),
            matrix.cols(),
            pruned.variance_retained
        );
        let state = PruningState {
            target,
            retained: pruned.retained,
            variance_retained: pruned.variance_retained,
            singular_values: svd.sigma,
            leading_loadings: loadings,
        };
        self.derived = Some(derive(matrix, &state.retained)?);
        let weights = uniform_weights(state.retained.len())?;
        self.header.pruning = Some(state);
        self.set_weights(weights, None);
        Ok(self.header.pruning.as_ref().expect("just set"))
    }

    fn ready(&self) -> Result<(&PruningState, &Derived)> {
        match (&self.header.pruning, &self.derived) {
            (Some(p), Some(d)) => Ok((p, d)),
            _ => Err(StoreError::Stage("run extract and prune first".into())),
        }
    }

    fn origin_group(&self, column: usize) -> LayerGroup {
        let layer = self.header.extraction.as_ref().expect("pruned implies extracted").origins[column].layer;
        self.header.manifest.layers[layer].group
    }

    fn rows_for(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| self.row_of(id).ok_or_else(|| StoreError::NotFound(format!("object {id}"))))
            .collect()
    }

    /// Scores every object against the request. Read-only.
    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse> {
        let (pruning, derived) = self.ready()?;
        if req.top_k == 0 {
            return Err(StoreError::Invalid("top_k must be >= 1".into()));
        }
        if req.query_ids.is_empty() {
            return Err(StoreError::Invalid("no query ids".into()));
        }
        let rows = self.rows_for(&req.query_ids)?;
        let spec = match req.membership {
            MembershipKind::Gaussian => {
                if rows.len() != 1 {
                    return Err(StoreError::Invalid(format!(
                        "gaussian membership takes exactly one query id, got {}",
                        rows.len()
                    )));
                }
                MembershipSpec::gaussian(rows[0], req.tau)
            }
            MembershipKind::Trapezoidal => MembershipSpec::trapezoidal(rows, req.tau),
        }
        .map_err(|e| StoreError::Invalid(e.to_string()))?;

        let n = pruning.retained.len();
        let (mut weights, stale, warning) = match &req.weights {
            WeightMode::Uniform => (uniform_weights(n)?, false, None),
            WeightMode::Svd => (svd_weights(pruning)?, false, None),
            WeightMode::Explicit(raw) => {
                if raw.len() != n {
                    return Err(StoreError::Invalid(format!("{} explicit weights for {n} retained features", raw.len())));
                }
                let w = WeightVector::from_raw(raw.clone(), WeightProvenance::Explicit)
                    .map_err(|e| StoreError::Invalid(e.to_string()))?;
                (w, false, None)
            }
            WeightMode::ClusterDiff => {
                let state = self
                    .header
                    .weights
                    .as_ref()
                    .filter(|w| w.vector.provenance() == WeightProvenance::ClusterDiff || w.warning.is_some())
                    .ok_or_else(|| StoreError::Conflict("no cluster weights; recompute weights first".into()))?;
                (state.vector.clone(), self.weights_stale(), state.warning.clone())
            }
        };

        let (x, stats, features) = match req.layer_group {
            None => (Cow::Borrowed(&derived.normalized), Cow::Borrowed(&derived.stats), n),
            Some(group) => {
                let keep: Vec<usize> = (0..n).filter(|&j| self.origin_group(pruning.retained[j]) == group).collect();
                if keep.is_empty() {
                    return Err(StoreError::Invalid(format!("no retained features in layer group `{}`", group.as_str())));
                }
                weights = weights.select(&keep).map_err(|e| StoreError::Invalid(e.to_string()))?;
                (
                    Cow::Owned(derived.normalized.select_columns(&keep)?),
                    Cow::Owned(derived.stats.select(&keep)),
                    keep.len(),
                )
            }
        };

        let ranked = rank_objects(&x, &stats, &spec, &weights, req.top_k)?;
        let objects = &self.header.manifest.objects;
        let results = ranked
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let obj = &objects[e.object];
                ResultRow {
                    rank: k + 1,
                    object_id: obj.id,
                    score: e.score,
                    label: obj.label.clone(),
                    thumbnail: obj.has_thumbnail.then(|| format!("/objects/{}/thumbnail", obj.id)),
                }
            })
            .collect();
        Ok(QueryResponse {
            results,
            weights: weights.provenance(),
            stale,
            warning,
            features,
            request: req.clone(),
        })
    }

    fn compute_weights(&self, method: WeightMethod) -> Result<WeightVector<f64>> {
        let (pruning, derived) = self.ready()?;
        match method {
            WeightMethod::Svd => svd_weights(pruning),
            WeightMethod::Eq5 => {
                let set = self.header.clusters.to_cluster_set(|id| self.row_of(id))?;
                Ok(weights_from_clusters(&set, &derived.normalized, self.header.clusters.min_size)?)
            }
        }
    }

    fn set_weights(&mut self, vector: WeightVector<f64>, warning: Option<String>) -> &WeightState {
        let revision = self.bump();
        self.header.weights.insert(WeightState {
            vector,
            revision,
            warning,
        })
    }

    /// Replaces the session weights. Errors leave the session unchanged.
    pub fn recompute_weights(&mut self, method: WeightMethod) -> Result<&WeightState> {
        let vector = self.compute_weights(method)?;
        Ok(self.set_weights(vector, None))
    }

    /// Like [`Session::recompute_weights`], but identical cluster means fall
    /// back to uniform weights with a warning instead of failing.
    pub fn recompute_weights_or_uniform(&mut self, method: WeightMethod) -> Result<&WeightState> {
        match self.compute_weights(method) {
            Ok(vector) => Ok(self.set_weights(vector, None)),
            Err(StoreError::Core(latsim_core::Error::DegenerateWeights(msg))) => {
                let n = self.ready()?.0.retained.len();
                log::warn!("weights fell back to uniform: {msg}");
                let vector = uniform_weights(n)?;
                Ok(self.set_weights(vector, Some(format!("{msg}; using uniform weights"))))
            }
            Err(e) => Err(e),
        }
    }

    /// Cluster mean differences over the retained features, summed by layer or layer group.
    pub fn magnitude_report(&self, grouping: ReportGrouping) -> Result<MagnitudeChangeReport<f64>> {
        let (pruning, derived) = self.ready()?;
        let origins = &self.header.extraction.as_ref().expect("pruned implies extracted").origins;
        let layers = &self.header.manifest.layers;
        let tags: Vec<String> = pruning
            .retained
            .iter()
            .map(|&c| {
                let layer = &layers[origins[c].layer];
                match grouping {
                    ReportGrouping::Layer => layer.id.clone(),
                    ReportGrouping::Group => layer.group.as_str().to_string(),
                }
            })
            .collect();
        let set = self.header.clusters.to_cluster_set(|id| self.row_of(id))?;
        Ok(magnitude_change_report(
            &set,
            &derived.normalized,
            &tags,
            self.header.clusters.min_size,
        )?)
    }

    pub fn apply_cluster_op(&mut self, op: &ClusterOp) -> Result<u64> {
        let revision = self.header.revision + 1;
        let rows = &self.rows;
        self.header.clusters.apply(op, revision, |id| rows.contains_key(&id))?;
        self.header.revision = revision;
        Ok(revision)
    }

    pub fn thumbnail(&self, id: u64) -> Result<Vec<u8>> {
        let row = self.row_of(id).ok_or_else(|| StoreError::NotFound(format!("object {id}")))?;
        if !self.header.manifest.objects[row].has_thumbnail {
            return Err(StoreError::NotFound(format!("object {id} has no thumbnail")));
        }
        let path = crate::bundle::thumbnail_path(&self.header.bundle_path, id);
        fs::read(&path).map_err(StoreError::io(path))
    }

    pub fn status(&self) -> SessionStatus {
        let h = &self.header;
        SessionStatus {
            bundle: h.bundle_path.clone(),
            objects: h.manifest.objects.len(),
            layers: h.manifest.layers.len(),
            extraction: h.extraction.as_ref().map(|e| e.options),
            features: h.matrix_shape.map(|s| s.1),
            retained: h.pruning.as_ref().map(|p| p.retained.len()),
            variance_target: h.pruning.as_ref().map(|p| p.target),
            variance_retained: h.pruning.as_ref().map(|p| p.variance_retained),
            revision: h.revision,
            cluster_revision: h.clusters.revision,
            weight_revision: h.weights.as_ref().map(|w| w.revision),
            weights: h.weights.as_ref().map(|w| w.vector.provenance()),
            stale: self.weights_stale(),
            warning: h.weights.as_ref().and_then(|w| w.warning.clone()),
            clusters: h.clusters.len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("session header serializes");
        let payload = self.matrix.as_ref().map_or(&[][..], |m| m.as_slice());
        let mut out = Vec::with_capacity(28 + header.len() + payload.len() * 8);
        out.extend_from_slice(SESSION_MAGIC);
        out.extend_from_slice(&SESSION_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != SESSION_MAGIC {
            return Err(StoreError::BundleFormat("not a session file (bad magic)".into()));
        }
        if bytes.len() < 12 {
            return Err(StoreError::Integrity("session file truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SESSION_FORMAT_VERSION {
            return Err(StoreError::Version {
                found: version,
                expected: SESSION_FORMAT_VERSION,
            });
        }
        if bytes.len() < 28 {
            return Err(StoreError::Integrity("session file truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(StoreError::Integrity("session checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| StoreError::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| StoreError::Integrity(format!("session header: {e}")))?;
        let payload = &body[header_end..];
        if payload.len() % 8 != 0 {
            return Err(StoreError::Integrity("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let matrix = match header.matrix_shape {
            Some((r, c)) => Some(Matrix::new(r, c, values).map_err(|e| StoreError::Integrity(e.to_string()))?),
            None if values.is_empty() => None,
            None => return Err(StoreError::Integrity("payload without matrix shape".into())),
        };
        check_consistency(&header, matrix.as_ref())?;
        let derived = match (&header.pruning, &matrix) {
            (Some(p), Some(m)) => Some(derive(m, &p.retained)?),
            _ => None,
        };
        let mut session = Self::from_header(header, matrix);
        session.derived = derived;
        Ok(session)
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(StoreError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(StoreError::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(format!("no session at {}", path.display())),
            _ => StoreError::io(path)(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn svd_weights(pruning: &PruningState) -> Result<WeightVector<f64>> {
    let loadings: Vec<f64> = pruning.retained.iter().map(|&c| pruning.leading_loadings[c]).collect();
    Ok(weights_from_svd(&loadings)?)
}

fn derive(matrix: &Matrix<f64>, retained: &[usize]) -> Result<Derived> {
    let (normalized, stats) = normalize_columns(&matrix.select_columns(retained)?);
    Ok(Derived { normalized, stats })
}

fn check_consistency(h: &Header, matrix: Option<&Matrix<f64>>) -> Result<()> {
    let bad = |msg: String| Err(StoreError::Integrity(msg));
    if let Some(m) = matrix {
        if m.rows() != h.manifest.objects.len() {
            return bad(format!("{} matrix rows for {} objects", m.rows(), h.manifest.objects.len()));
        }
        if let Some(e) = &h.extraction {
            if e.origins.len() != m.cols() {
                return bad(format!("{} column origins for {} columns", e.origins.len(), m.cols()));
            }
        }
    }
    if let Some(p) = &h.pruning {
        let width = match matrix {
            Some(m) => m.cols(),
            None => return bad("pruning state without a matrix".into()),
        };
        if p.retained.windows(2).any(|w| w[0] >= w[1]) || p.retained.iter().any(|&c| c >= width) {
            return bad("retained indices are not ascending column ids".into());
        }
        if p.leading_loadings.len() != width {
            return bad("loading count differs from matrix width".into());
        }
        if let Some(w) = &h.weights {
            if w.vector.len() != p.retained.len() {
                return bad(format!("{} weights for {} retained features", w.vector.len(), p.retained.len()));
            }
        }
    } else if h.weights.is_some() {
        return bad("weights without pruning state".into());
    }
    Ok(())
}

/// Path of the container inside a session directory.
pub fn session_file(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(SESSION_FILE)
}
