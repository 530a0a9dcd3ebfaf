use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use latsim_core::extraction::{ExtractOptions, LayerDescriptor, LayerGroup};
use latsim_core::similarity::{weights_from_clusters, Cluster, ClusterSet};
use latsim_service::{router, AppState, ClustersReply, WeightsReply};
use latsim_store::synth::{planted_cluster, synth_bundle, synth_object_id, SynthOptions};
use latsim_store::{BundleWriter, QueryRequest, QueryResponse, Session};
use serde_json::{json, Value};
use tower::ServiceExt;

const PNG: &[u8] = b"\x89PNG\r\n\x1a\nnot-really-an-image";

fn planted_session(dir: &std::path::Path) -> Session {
    synth_bundle(dir, &SynthOptions::new(30, 7)).unwrap();
    let mut s = Session::ingest(dir).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(0.99).unwrap();
    s
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn ids_of_cluster(k: usize) -> Vec<u64> {
    (0..30).filter(|&i| planted_cluster(i, 3) == k).map(synth_object_id).collect()
}

#[tokio::test]
async fn no_session_is_409() {
    let app = router(AppState::new(None, None));
    let (status, body) = call_json(&app, "GET", "/session/status", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_session");
    let q = json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1000]});
    assert_eq!(call(&app, "POST", "/query", Some(q)).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn gaussian_self_query() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    let q = json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1004], "top_k": 5});
    let (status, body) = call_json(&app, "POST", "/query", Some(q)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["results"][0]["object_id"], 1004);
    assert_eq!(body["results"][0]["score"], 1.0);
    assert_eq!(body["results"][0]["rank"], 1);
    assert_eq!(body["results"].as_array().unwrap().len(), 5);
    assert_eq!(body["weights"], "uniform");
    assert_eq!(body["stale"], false);
    assert_eq!(body["request"]["query_ids"], json!([1004]));
}

#[tokio::test]
async fn response_matches_direct_session_call() {
    let dir = tempfile::tempdir().unwrap();
    let session = planted_session(dir.path());
    let req = QueryRequest::trapezoidal(vec![1000, 1003, 1006], 0.25, 30);
    let direct = session.query(&req).unwrap().to_json();
    let app = router(AppState::new(Some(session), None));
    let (status, bytes) = call(&app, "POST", "/query", Some(serde_json::to_value(&req).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(bytes).unwrap(), direct);
}

#[tokio::test]
async fn invalid_queries() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    let cases = [
        (json!({"membership": "trapezoid", "tau": 0.2, "query_ids": [1000]}), StatusCode::BAD_REQUEST),
        (json!({"membership": "gaussian", "tau": -1.0, "query_ids": [1000]}), StatusCode::BAD_REQUEST),
        (json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1000], "top_k": 0}), StatusCode::BAD_REQUEST),
        (json!({"membership": "cauchy", "tau": 1.0, "query_ids": [1000]}), StatusCode::BAD_REQUEST),
        (json!({"membership": "gaussian", "tau": 1.0, "query_ids": [7]}), StatusCode::NOT_FOUND),
        (
            json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1000], "weights": "cluster_diff"}),
            StatusCode::CONFLICT,
        ),
    ];
    for (body, want) in cases {
        let (status, reply) = call_json(&app, "POST", "/query", Some(body.clone())).await;
        assert_eq!(status, want, "{body} -> {reply}");
        assert!(reply["message"].is_string());
    }
    let raw = Request::post("/query").body(Body::from("{oops")).unwrap();
    assert_eq!(app.clone().oneshot(raw).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn recompute_needs_two_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    let op = json!({"op": "assign", "name": "a", "objects": ids_of_cluster(0)});
    assert_eq!(call(&app, "POST", "/clusters", Some(op)).await.0, StatusCode::OK);
    let (status, body) = call_json(&app, "POST", "/weights/recompute", Some(json!({"method": "eq5"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "insufficient_clusters");
    assert!(body["message"].as_str().unwrap().contains("at least 2 clusters"));
}

#[tokio::test]
async fn reweight_loop_clears_staleness_and_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let session = planted_session(dir.path());
    let (x, _) = session.normalized().map(|(x, s)| (x.clone(), s.clone())).unwrap();
    let state = AppState::new(Some(session), None);
    let app = router(Arc::clone(&state));

    for k in 0..2 {
        let op = json!({"op": "assign", "name": format!("c{k}"), "objects": ids_of_cluster(k)});
        let (status, body) = call_json(&app, "POST", "/clusters", Some(op)).await;
        assert_eq!(status, StatusCode::OK);
        let reply: ClustersReply = serde_json::from_value(body).unwrap();
        assert!(reply.stale);
    }
    let (_, status_body) = call_json(&app, "GET", "/session/status", None).await;
    assert_eq!(status_body["stale"], true);

    let (status, body) = call_json(&app, "POST", "/weights/recompute", Some(json!({"method": "eq5"}))).await;
    assert_eq!(status, StatusCode::OK);
    let reply: WeightsReply = serde_json::from_value(body).unwrap();
    assert!(!reply.stale);
    assert_eq!(reply.provenance.as_str(), "cluster_diff");

    let rows = |k: usize| (0..30).filter(move |&i| planted_cluster(i, 3) == k);
    let set = ClusterSet::new(vec![Cluster::new("c0", rows(0)), Cluster::new("c1", rows(1))]);
    let oracle = weights_from_clusters(&set, &x, 1).unwrap();
    assert_eq!(reply.weights, oracle.as_slice());

    let q = json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1000], "weights": "cluster_diff"});
    let (_, body) = call_json(&app, "POST", "/query", Some(q.clone())).await;
    assert_eq!(body["weights"], "cluster_diff");
    assert_eq!(body["stale"], false);

    let op = json!({"op": "unassign", "name": "c1", "objects": [1001]});
    assert_eq!(call(&app, "POST", "/clusters", Some(op)).await.0, StatusCode::OK);
    let (_, body) = call_json(&app, "POST", "/query", Some(q)).await;
    assert_eq!(body["stale"], true);
    let (_, status_body) = call_json(&app, "GET", "/session/status", None).await;
    assert_eq!(status_body["stale"], true);
    assert_eq!(status_body["weights"], "cluster_diff");
}

#[tokio::test]
async fn degenerate_clusters_fall_back_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let layers = vec![LayerDescriptor::new("l", 1, 2, LayerGroup::Encoder)];
    let mut w = BundleWriter::create(dir.path(), 1, layers, true).unwrap();
    for (id, v) in [(1u64, [0.5f32, 0.5]), (2, [0.5, 0.5]), (3, [0.9, 0.1])] {
        w.add_object(id, None, &[v.to_vec()], Some(&[1]), None).unwrap();
    }
    w.finish().unwrap();
    let mut s = Session::ingest(dir.path()).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(1.0).unwrap();
    let app = router(AppState::new(Some(s), None));
    for (name, id) in [("a", 1), ("b", 2)] {
        let op = json!({"op": "assign", "name": name, "objects": [id]});
        call(&app, "POST", "/clusters", Some(op)).await;
    }
    let (status, body) = call_json(&app, "POST", "/weights/recompute", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["provenance"], "uniform");
    assert!(body["warning"].as_str().unwrap().contains("uniform"));
}

#[tokio::test]
async fn cluster_crud_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    let (_, body) = call_json(&app, "POST", "/clusters", Some(json!({"op": "add", "name": "x"}))).await;
    let first = body["revision"].as_u64().unwrap();
    let (status, _) = call_json(&app, "POST", "/clusters", Some(json!({"op": "add", "name": "x"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, body) = call_json(
        &app,
        "POST",
        "/clusters",
        Some(json!({"op": "rename", "from": "x", "to": "y"})),
    )
    .await;
    assert!(body["revision"].as_u64().unwrap() > first);
    assert_eq!(body["clusters"][0]["name"], "y");
    let (status, _) = call_json(
        &app,
        "POST",
        "/clusters",
        Some(json!({"op": "assign", "name": "y", "objects": [424242]})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call_json(&app, "DELETE", "/clusters?name=y", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["clusters"].as_array().unwrap().is_empty());
    let (status, _) = call_json(&app, "DELETE", "/clusters?name=y", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, body) = call_json(&app, "GET", "/clusters", None).await;
    assert!(body["clusters"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn thumbnails() {
    let dir = tempfile::tempdir().unwrap();
    let layers = vec![LayerDescriptor::new("l", 1, 1, LayerGroup::Encoder)];
    let mut w = BundleWriter::create(dir.path(), 1, layers, true).unwrap();
    w.add_object(1, None, &[vec![0.2]], Some(&[1]), Some(PNG)).unwrap();
    w.add_object(2, None, &[vec![0.7]], Some(&[1]), None).unwrap();
    w.finish().unwrap();
    let mut s = Session::ingest(dir.path()).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(1.0).unwrap();
    let app = router(AppState::new(Some(s), None));

    let (status, bytes) = call(&app, "GET", "/objects/1/thumbnail", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, PNG);
    assert_eq!(call(&app, "GET", "/objects/2/thumbnail", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/objects/99/thumbnail", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/objects/abc/thumbnail", None).await.0, StatusCode::NOT_FOUND);

    let q = json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1]});
    let (_, body) = call_json(&app, "POST", "/query", Some(q)).await;
    assert_eq!(body["results"][0]["thumbnail"], "/objects/1/thumbnail");
    assert_eq!(body["results"][1]["thumbnail"], Value::Null);
}

#[tokio::test]
async fn cors_allows_local_origins_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    for (origin, allowed) in [
        ("http://localhost:5173", true),
        ("http://127.0.0.1:8080", true),
        ("http://localhost.evil.com", false),
        ("https://example.com", false),
    ] {
        let req = Request::builder()
            .method("OPTIONS")
            .uri("/query")
            .header(header::ORIGIN, origin)
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
            .body(Body::empty())
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let got = resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN);
        assert_eq!(got.is_some(), allowed, "{origin}");
    }
}

#[tokio::test]
async fn replaying_a_request_log_reproduces_responses() {
    let dir = tempfile::tempdir().unwrap();
    let session = planted_session(dir.path());
    let saved = session.to_bytes();
    let log = vec![
        ("POST", "/query", Some(json!({"membership": "gaussian", "tau": 0.8, "query_ids": [1002]}))),
        ("POST", "/clusters", Some(json!({"op": "assign", "name": "a", "objects": ids_of_cluster(0)}))),
        ("POST", "/clusters", Some(json!({"op": "assign", "name": "b", "objects": ids_of_cluster(2)}))),
        ("POST", "/weights/recompute", Some(json!({"method": "eq5"}))),
        (
            "POST",
            "/query",
            Some(json!({"membership": "trapezoid", "tau": 0.3, "query_ids": [1000, 1003], "weights": "cluster_diff", "top_k": 30})),
        ),
        ("POST", "/weights/recompute", Some(json!({"method": "svd"}))),
        ("GET", "/session/status", None),
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let app = router(AppState::new(Some(Session::from_bytes(&saved).unwrap()), None));
        let mut out = Vec::new();
        for (m, uri, body) in &log {
            out.push(call(&app, m, uri, body.clone()).await);
        }
        runs.push(out);
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].iter().all(|(s, _)| *s == StatusCode::OK));
}

#[tokio::test]
async fn mutations_persist_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let session = planted_session(&dir.path().join("b"));
    let path = dir.path().join("s.lss");
    session.save(&path).unwrap();
    let app = router(AppState::new(Some(session), Some(path.clone())));
    let op = json!({"op": "assign", "name": "keep", "objects": [1001, 1004]});
    call(&app, "POST", "/clusters", Some(op)).await;
    let back = Session::load(&path).unwrap();
    assert_eq!(back.cluster_views()[0].members, vec![1001, 1004]);
}

#[tokio::test]
async fn no_endpoint_changes_the_feature_space() {
    let dir = tempfile::tempdir().unwrap();
    let session = planted_session(dir.path());
    let before = (
        session.activation_matrix().cloned(),
        session.pruning().cloned(),
        session.normalized().map(|(x, s)| (x.clone(), s.clone())),
    );
    let state = AppState::new(Some(session), None);
    let app = router(Arc::clone(&state));
    call(&app, "POST", "/clusters", Some(json!({"op": "assign", "name": "a", "objects": [1000, 1003]}))).await;
    call(&app, "POST", "/clusters", Some(json!({"op": "assign", "name": "b", "objects": [1001]}))).await;
    call(&app, "POST", "/weights/recompute", None).await;
    call(&app, "DELETE", "/clusters?name=a", None).await;
    let after = state.snapshot().unwrap();
    assert_eq!(before.0.as_ref(), after.activation_matrix());
    assert_eq!(before.1.as_ref(), after.pruning());
    assert_eq!(
        before.2,
        after.normalized().map(|(x, s)| (x.clone(), s.clone()))
    );
}

#[tokio::test]
async fn typed_response_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(Some(planted_session(dir.path())), None));
    let q = json!({"membership": "gaussian", "tau": 1.0, "query_ids": [1010], "top_k": 30});
    let (_, bytes) = call(&app, "POST", "/query", Some(q)).await;
    let resp: QueryResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(resp.results.len(), 30);
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));
}
