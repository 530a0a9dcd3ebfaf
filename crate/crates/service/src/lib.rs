//! HTTP JSON API over one similarity session.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/query` | `QueryRequest` | `QueryResponse` |
//! | GET | `/clusters` | | `ClustersReply` |
//! | POST | `/clusters` | `ClusterOp` | `ClustersReply` |
//! | DELETE | `/clusters?name=<name>` | | `ClustersReply` |
//! | POST | `/weights/recompute` | `{"method": "eq5" \| "svd"}` | `WeightsReply` |
//! | GET | `/objects/{id}/thumbnail` | | `image/png` |
//! | GET | `/session/status` | | `SessionStatus` |
//!
//! Errors reply `{"error": <kind>, "message": <text>}` with 400 for invalid
//! requests, 404 for unknown ids, 409 when no session is loaded or the
//! session is not ready, and 422 when cluster weights cannot be computed.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use latsim_core::similarity::WeightProvenance;
use latsim_store::{ClusterOp, ClusterView, QueryRequest, Session, StoreError, WeightMethod};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Shared state: one session behind a single-writer lock.
pub struct AppState {
    session: RwLock<Option<Session>>,
    /// Where mutations are persisted; `None` keeps them in memory.
    persist_to: Option<PathBuf>,
}

impl AppState {
    pub fn new(session: Option<Session>, persist_to: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            session: RwLock::new(session),
            persist_to,
        })
    }

    pub fn snapshot(&self) -> Option<Session> {
        self.session.read().expect("session lock").clone()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self(
            status,
            ErrorBody {
                error: kind.into(),
                message: message.into(),
            },
        )
    }

    fn no_session() -> Self {
        Self::new(StatusCode::CONFLICT, "no_session", "no session loaded")
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use latsim_core::Error as C;
        let msg = e.to_string();
        let (status, kind) = match &e {
            StoreError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            StoreError::Stage(_) => (StatusCode::CONFLICT, "session_not_ready"),
            StoreError::Core(C::InsufficientClusters(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_clusters"),
            StoreError::Core(C::ClusterTooSmall { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "cluster_too_small"),
            StoreError::Core(C::DegenerateWeights(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_weights"),
            StoreError::Core(C::Config(_) | C::Query(_) | C::Shape(_)) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, kind, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))
}

fn read<R>(state: &AppState, f: impl FnOnce(&Session) -> ApiResult<R>) -> ApiResult<R> {
    let guard = state.session.read().expect("session lock");
    f(guard.as_ref().ok_or_else(ApiError::no_session)?)
}

/// Runs `f` under the writer lock and persists the session if it succeeded.
fn write<R>(state: &AppState, f: impl FnOnce(&mut Session) -> ApiResult<R>) -> ApiResult<R> {
    let mut guard = state.session.write().expect("session lock");
    let session = guard.as_mut().ok_or_else(ApiError::no_session)?;
    let out = f(session)?;
    if let Some(path) = &state.persist_to {
        session.save(path)?;
    }
    Ok(out)
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: QueryRequest = parse_body(&body)?;
    let resp = read(&state, |s| Ok(s.query(&req)?))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], resp.to_json()).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersReply {
    pub revision: u64,
    pub stale: bool,
    pub clusters: Vec<ClusterView>,
}

fn clusters_reply(s: &Session) -> ClustersReply {
    ClustersReply {
        revision: s.clusters().revision,
        stale: s.weights_stale(),
        clusters: s.cluster_views(),
    }
}

async fn list_clusters(State(state): State<Arc<AppState>>) -> ApiResult<Json<ClustersReply>> {
    read(&state, |s| Ok(Json(clusters_reply(s))))
}

async fn mutate_clusters(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ClustersReply>> {
    let op: ClusterOp = parse_body(&body)?;
    write(&state, |s| {
        s.apply_cluster_op(&op)?;
        Ok(Json(clusters_reply(s)))
    })
}

#[derive(Debug, Deserialize)]
struct DeleteParams {
    name: String,
}

async fn delete_cluster(State(state): State<Arc<AppState>>, Query(p): Query<DeleteParams>) -> ApiResult<Json<ClustersReply>> {
    write(&state, |s| {
        s.apply_cluster_op(&ClusterOp::Remove { name: p.name })?;
        Ok(Json(clusters_reply(s)))
    })
}

#[derive(Debug, Deserialize)]
struct RecomputeBody {
    #[serde(default = "default_method")]
    method: WeightMethod,
}

fn default_method() -> WeightMethod {
    WeightMethod::Eq5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsReply {
    pub revision: u64,
    pub provenance: WeightProvenance,
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub weights: Vec<f64>,
}

async fn recompute(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<WeightsReply>> {
    let method = if body.is_empty() {
        default_method()
    } else {
        parse_body::<RecomputeBody>(&body)?.method
    };
    write(&state, |s| {
        let w = s.recompute_weights_or_uniform(method)?.clone();
        Ok(Json(WeightsReply {
            revision: w.revision,
            provenance: w.vector.provenance(),
            stale: s.weights_stale(),
            warning: w.warning,
            weights: w.vector.as_slice().to_vec(),
        }))
    })
}

async fn thumbnail(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("object {id}")))?;
    let bytes = read(&state, |s| Ok(s.thumbnail(id)?))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn status(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    read(&state, |s| Ok(Json(s.status()).into_response()))
}

/// Accepts browser origins on the local machine only.
pub fn local_cors() -> CorsLayer {
    CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin: &HeaderValue, _| {
            let o = origin.as_bytes();
            ["http://localhost", "http://127.0.0.1", "http://[::1]"]
                .iter()
                .any(|p| o.starts_with(p.as_bytes()) && matches!(o.get(p.len()), None | Some(b':')))
        }))
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/clusters", get(list_clusters).post(mutate_clusters).delete(delete_cluster))
        .route("/weights/recompute", post(recompute))
        .route("/objects/{id}/thumbnail", get(thumbnail))
        .route("/session/status", get(status))
        .layer(local_cors())
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
