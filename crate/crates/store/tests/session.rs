use std::path::Path;

use latsim_core::extraction::{ExtractOptions, LayerDescriptor, LayerGroup};
use latsim_core::linalg::normalize_columns;
use latsim_core::similarity::{uniform_weights, weights_from_clusters, Cluster, ClusterSet, WeightProvenance};
use latsim_store::session::{session_file, SESSION_FORMAT_VERSION};
use latsim_store::synth::{planted_cluster, synth_bundle, synth_object_id, SynthOptions};
use latsim_store::{
    BundleWriter, ClusterOp, QueryRequest, ReportGrouping, Session, StoreError, WeightMethod, WeightMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-pixel layers so that each object's feature vector is written verbatim.
fn matrix_bundle(dir: &Path, rows: &[Vec<f32>], split: usize) {
    let cols = rows[0].len();
    let layers = vec![
        LayerDescriptor::new("a", 1, split, LayerGroup::Encoder),
        LayerDescriptor::new("b", 1, cols - split, LayerGroup::Decoder),
    ];
    let mut w = BundleWriter::create(dir, 1, layers, true).unwrap();
    for (i, r) in rows.iter().enumerate() {
        w.add_object(i as u64 * 10, None, &[r[..split].to_vec(), r[split..].to_vec()], Some(&[1]), None)
            .unwrap();
    }
    w.finish().unwrap();
}

fn random_rows(seed: u64, objects: usize, cols: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..objects)
        .map(|_| (0..cols).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

fn ready_session(dir: &Path) -> Session {
    matrix_bundle(dir, &random_rows(5, 12, 6), 3);
    let mut s = Session::ingest(dir).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(1.0).unwrap();
    s
}

fn assign(name: &str, ids: &[u64]) -> ClusterOp {
    ClusterOp::Assign {
        name: name.into(),
        objects: ids.to_vec(),
    }
}

#[test]
fn stages_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    matrix_bundle(dir.path(), &random_rows(1, 4, 4), 2);
    let mut s = Session::ingest(dir.path()).unwrap();
    assert!(matches!(s.prune(0.9), Err(StoreError::Stage(_))));
    assert!(matches!(s.query(&QueryRequest::gaussian(0, 1.0, 3)), Err(StoreError::Stage(_))));
    s.extract(ExtractOptions::default()).unwrap();
    assert!(matches!(s.query(&QueryRequest::gaussian(0, 1.0, 3)), Err(StoreError::Stage(_))));
}

#[test]
fn self_query_ranks_first_with_unit_score() {
    let dir = tempfile::tempdir().unwrap();
    let s = ready_session(dir.path());
    for id in s.object_ids() {
        let r = s.query(&QueryRequest::gaussian(id, 0.5, 3)).unwrap();
        assert_eq!(r.results[0].object_id, id);
        assert_eq!(r.results[0].score, 1.0);
        assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",1.000000000"));
    }
}

#[test]
fn invalid_requests() {
    let dir = tempfile::tempdir().unwrap();
    let s = ready_session(dir.path());
    let one = QueryRequest::trapezoidal(vec![10], 0.1, 3);
    assert!(matches!(s.query(&one), Err(StoreError::Invalid(_))));
    assert!(matches!(s.query(&QueryRequest::gaussian(7, 1.0, 3)), Err(StoreError::NotFound(_))));
    assert!(matches!(s.query(&QueryRequest::gaussian(10, 0.0, 3)), Err(StoreError::Invalid(_))));
    assert!(matches!(s.query(&QueryRequest::gaussian(10, 1.0, 0)), Err(StoreError::Invalid(_))));
    let explicit = QueryRequest::gaussian(10, 1.0, 3).with_weights(WeightMode::Explicit(vec![1.0; 2]));
    assert!(matches!(s.query(&explicit), Err(StoreError::Invalid(_))));
    let cluster = QueryRequest::gaussian(10, 1.0, 3).with_weights(WeightMode::ClusterDiff);
    assert!(matches!(s.query(&cluster), Err(StoreError::Conflict(_))));
}

#[test]
fn layer_group_filter_restricts_features() {
    let dir = tempfile::tempdir().unwrap();
    let s = ready_session(dir.path());
    let mut req = QueryRequest::gaussian(20, 1.0, 12);
    req.layer_group = Some(LayerGroup::Decoder);
    let r = s.query(&req).unwrap();
    assert_eq!(r.features, 3);
    req.layer_group = Some(LayerGroup::Bottleneck);
    assert!(matches!(s.query(&req), Err(StoreError::Invalid(_))));
}

#[test]
fn explicit_one_hot_weights_score_single_feature() {
    let dir = tempfile::tempdir().unwrap();
    let s = ready_session(dir.path());
    let mut w = vec![0.0; 6];
    w[2] = 5.0;
    let r = s
        .query(&QueryRequest::gaussian(30, 1.0, 12).with_weights(WeightMode::Explicit(w)))
        .unwrap();
    assert_eq!(r.weights, WeightProvenance::Explicit);
    let (x, stats) = s.normalized().unwrap();
    let q = x[(3, 2)];
    for row in &r.results {
        let i = s.row_of(row.object_id).unwrap();
        let expect = (-((x[(i, 2)] - q) / stats.std[2]).powi(2)).exp();
        assert!((row.score - expect).abs() < 1e-12);
    }
}

#[test]
fn save_load_reproduces_query_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let bdir = dir.path().join("bundle");
    synth_bundle(&bdir, &SynthOptions::new(12, 4)).unwrap();
    let mut s = Session::ingest(&bdir).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(0.99).unwrap();
    s.apply_cluster_op(&assign("x", &[1000, 1003])).unwrap();
    s.apply_cluster_op(&assign("y", &[1001, 1004])).unwrap();
    s.recompute_weights(WeightMethod::Eq5).unwrap();
    let path = session_file(dir.path());
    s.save(&path).unwrap();
    let back = Session::load(&path).unwrap();
    for mode in [WeightMode::Uniform, WeightMode::ClusterDiff, WeightMode::Svd] {
        let req = QueryRequest::trapezoidal(vec![1000, 1003], 0.3, 12).with_weights(mode);
        let a = s.query(&req).unwrap();
        let b = back.query(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        for (ra, rb) in a.results.iter().zip(&b.results) {
            assert_eq!(ra.score.to_bits(), rb.score.to_bits());
        }
    }
    assert_eq!(s.status(), back.status());
    assert_eq!(s.to_bytes(), back.to_bytes());
}

#[test]
fn corrupt_and_foreign_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = ready_session(dir.path());
    let good = s.to_bytes();

    let mut tail = good.clone();
    let n = tail.len();
    tail[n - 3] ^= 0x10;
    assert!(matches!(Session::from_bytes(&tail), Err(StoreError::Integrity(_))));

    let mut body = good.clone();
    body[40] ^= 0x01;
    assert!(matches!(Session::from_bytes(&body), Err(StoreError::Integrity(_))));

    assert!(matches!(Session::from_bytes(&good[..n - 5]), Err(StoreError::Integrity(_))));

    let mut version = good.clone();
    version[8..12].copy_from_slice(&(SESSION_FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Session::from_bytes(&version),
        Err(StoreError::Version { found: 2, expected: 1 })
    ));

    assert!(matches!(Session::from_bytes(b"PK\x03\x04junk"), Err(StoreError::BundleFormat(_))));
}

#[test]
fn retained_index_list_of_453_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(453);
    let cols = 500;
    let zero: Vec<usize> = {
        let mut all: Vec<usize> = (0..cols).collect();
        for i in 0..cols {
            let j = rng.random_range(i..cols);
            all.swap(i, j);
        }
        all[..cols - 453].to_vec()
    };
    let rows: Vec<Vec<f32>> = (0..8)
        .map(|_| {
            (0..cols)
                .map(|j| if zero.contains(&j) { 0.0 } else { rng.random_range(0.1..1.0) })
                .collect()
        })
        .collect();
    matrix_bundle(&dir.path().join("b"), &rows, 250);
    let mut s = Session::ingest(dir.path().join("b")).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    let retained = s.prune(1.0).unwrap().retained.clone();
    assert_eq!(retained.len(), 453);
    assert!(retained.iter().all(|j| !zero.contains(j)));
    let path = dir.path().join("s.lss");
    s.save(&path).unwrap();
    assert_eq!(Session::load(&path).unwrap().pruning().unwrap().retained, retained);
}

#[test]
fn twelve_clusters_of_twenty_persist() {
    let dir = tempfile::tempdir().unwrap();
    let bdir = dir.path().join("b");
    matrix_bundle(&bdir, &random_rows(12, 240, 4), 2);
    let mut s = Session::ingest(&bdir).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(1.0).unwrap();
    s.set_cluster_policy(20, false);
    for k in 0..12u64 {
        let ids: Vec<u64> = (0..20).map(|m| (k * 20 + m) * 10).collect();
        s.apply_cluster_op(&assign(&format!("group-{k:02}"), &ids)).unwrap();
    }
    s.recompute_weights(WeightMethod::Eq5).unwrap();
    let path = dir.path().join("s.lss");
    s.save(&path).unwrap();
    let back = Session::load(&path).unwrap();
    assert_eq!(back.cluster_views(), s.cluster_views());
    assert_eq!(back.clusters().len(), 12);
    assert!(back.cluster_views().iter().all(|c| c.members.len() == 20));
    assert_eq!(back.clusters().min_size, 20);
    assert_eq!(back.weights(), s.weights());
}

#[test]
fn revision_protocol_and_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ready_session(dir.path());
    assert!(!s.weights_stale());
    let mut last = s.revision();
    let mut step = |s: &mut Session, op: ClusterOp| {
        let r = s.apply_cluster_op(&op).unwrap();
        assert!(r > last);
        last = r;
        assert!(s.weights_stale());
    };
    step(&mut s, assign("a", &[0, 10, 20]));
    step(&mut s, assign("b", &[30, 40]));
    let w = s.recompute_weights(WeightMethod::Eq5).unwrap().revision;
    assert!(w > last);
    assert!(!s.weights_stale());
    let req = QueryRequest::gaussian(0, 1.0, 5).with_weights(WeightMode::ClusterDiff);
    let r = s.query(&req).unwrap();
    assert_eq!(r.weights, WeightProvenance::ClusterDiff);
    assert!(!r.stale);
    s.apply_cluster_op(&ClusterOp::Rename {
        from: "b".into(),
        to: "c".into(),
    })
    .unwrap();
    assert!(s.weights_stale());
    assert!(s.query(&req).unwrap().stale);
    assert_eq!(s.status().stale, true);
}

#[test]
fn cluster_weights_match_direct_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ready_session(dir.path());
    s.apply_cluster_op(&assign("p", &[0, 10, 20, 30])).unwrap();
    s.apply_cluster_op(&assign("q", &[60, 70, 80])).unwrap();
    let got = s.recompute_weights(WeightMethod::Eq5).unwrap().vector.clone();
    let (x, _) = normalize_columns(s.activation_matrix().unwrap());
    let set = ClusterSet::new(vec![Cluster::new("p", [0, 1, 2, 3]), Cluster::new("q", [6, 7, 8])]);
    let want = weights_from_clusters(&set, &x, 1).unwrap();
    for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn weight_recompute_errors_and_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![vec![0.2f32, 0.4], vec![0.2, 0.4], vec![0.9, 0.1]];
    matrix_bundle(dir.path(), &rows, 1);
    let mut s = Session::ingest(dir.path()).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(1.0).unwrap();
    s.apply_cluster_op(&assign("one", &[0])).unwrap();
    let before = s.weights().cloned();
    assert!(matches!(
        s.recompute_weights(WeightMethod::Eq5),
        Err(StoreError::Core(latsim_core::Error::InsufficientClusters(1)))
    ));
    assert_eq!(s.weights().cloned(), before);

    s.apply_cluster_op(&assign("two", &[10])).unwrap();
    assert!(matches!(
        s.recompute_weights(WeightMethod::Eq5),
        Err(StoreError::Core(latsim_core::Error::DegenerateWeights(_)))
    ));
    let w = s.recompute_weights_or_uniform(WeightMethod::Eq5).unwrap();
    assert_eq!(w.vector, uniform_weights(2).unwrap());
    assert!(w.warning.is_some());
    assert!(!s.weights_stale());
    let r = s
        .query(&QueryRequest::gaussian(0, 1.0, 3).with_weights(WeightMode::ClusterDiff))
        .unwrap();
    assert_eq!(r.weights, WeightProvenance::Uniform);
    assert!(r.warning.is_some());
}

#[test]
fn magnitude_report_on_planted_clusters() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path(), &SynthOptions::new(30, 7)).unwrap();
    let mut s = Session::ingest(dir.path()).unwrap();
    s.extract(ExtractOptions::default()).unwrap();
    s.prune(0.99).unwrap();
    for k in 0..3 {
        let ids: Vec<u64> = (0..30).filter(|&i| planted_cluster(i, 3) == k).map(synth_object_id).collect();
        s.apply_cluster_op(&assign(&format!("c{k}"), &ids)).unwrap();
    }
    for grouping in [ReportGrouping::Layer, ReportGrouping::Group] {
        let rep = s.magnitude_report(grouping).unwrap();
        let pct: f64 = rep.groups.iter().map(|g| g.percent).sum();
        assert!((pct - 100.0).abs() < 1e-9);
        assert_eq!(*rep.histogram.cumulative.last().unwrap(), rep.per_feature.len());
    }
    let by_group = s.magnitude_report(ReportGrouping::Group).unwrap();
    assert_eq!(by_group.groups.len(), 3);
}

#[test]
fn svd_weights_follow_leading_loadings() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ready_session(dir.path());
    let w = s.recompute_weights(WeightMethod::Svd).unwrap().vector.clone();
    let p = s.pruning().unwrap();
    let raw: Vec<f64> = p.retained.iter().map(|&c| p.leading_loadings[c].abs()).collect();
    let total: f64 = raw.iter().sum();
    for (a, b) in w.as_slice().iter().zip(&raw) {
        assert!((a - b / total).abs() < 1e-15);
    }
    assert_eq!(w.provenance(), WeightProvenance::Svd);
}
