use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latsim_store::session::session_file;
use latsim_store::{QueryRequest, Session, WeightMode};

fn latsim(session: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latsim"))
        .args(args)
        .env("LATSIM_SESSION", session)
        .output()
        .expect("binary runs")
}

fn ok(session: &Path, args: &[&str]) -> String {
    let out = latsim(session, args);
    assert!(
        out.status.success(),
        "latsim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(session: &Path, args: &[&str]) -> i32 {
    latsim(session, args).status.code().unwrap()
}

/// synth-bundle, ingest, extract, prune at 0.99.
fn pipeline(root: &Path, objects: usize, seed: u64) -> PathBuf {
    let bundle = root.join("bundle");
    let session = root.join("session");
    let b = bundle.to_str().unwrap();
    ok(&session, &["synth-bundle", "--objects", &objects.to_string(), "--seed", &seed.to_string(), "--out", b]);
    ok(&session, &["ingest", b]);
    ok(&session, &["extract", "--mode", "masked"]);
    ok(&session, &["prune", "--variance", "0.99"]);
    session
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against a committed file; `LATSIM_BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("LATSIM_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "output differs from {name}");
}

#[test]
fn golden_pipeline_synth_20_seed_7() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 20, 7);
    check_golden(
        "query_gaussian_1000.csv",
        &ok(&s, &["query", "--id", "1000", "--mf", "gaussian", "--tau", "1", "--top-k", "20", "--format", "csv"]),
    );
    brute_force_matches_golden(&s, "query_gaussian_1000.csv", 1000);
    check_golden(
        "query_multi_1000_1003_1006.csv",
        &ok(&s, &["query-multi", "--ids", "1000,1003,1006", "--mf", "trapezoid", "--tau", "0.2", "--top-k", "20", "--format", "csv"]),
    );
    check_golden(
        "query_svd_1001.csv",
        &ok(&s, &["query", "--id", "1001", "--weights", "svd", "--top-k", "20", "--format", "csv"]),
    );
    ok(&s, &["cluster", "assign", "a", "1000", "1003", "1006", "1009"]);
    ok(&s, &["cluster", "assign", "b", "1001", "1004", "1007"]);
    ok(&s, &["weights", "recompute", "--method", "eq5"]);
    check_golden("weights_eq5.csv", &ok(&s, &["weights", "show"]));
    check_golden(
        "query_cluster_1002.csv",
        &ok(&s, &["query", "--id", "1002", "--weights", "cluster", "--top-k", "20", "--format", "csv"]),
    );
    check_golden(
        "magnitude_change_by_group.csv",
        &ok(&s, &["report", "magnitude-change", "--by", "group", "--format", "csv"]),
    );
}

/// Recomputes every Gaussian score from the normalized matrix with uniform weights.
fn brute_force_matches_golden(session_dir: &Path, name: &str, query: u64) {
    let s = Session::load(session_file(session_dir)).unwrap();
    let (x, _) = s.normalized().unwrap();
    let q = s.row_of(query).unwrap();
    let n = x.cols();
    let mut scores: Vec<(u64, f64)> = s
        .object_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut total = 0.0;
            for j in 0..n {
                let col: Vec<f64> = (0..x.rows()).map(|r| x[(r, j)]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                let g = if sd == 0.0 {
                    f64::from(u8::from(x[(i, j)] == x[(q, j)]))
                } else {
                    (-((x[(i, j)] - x[(q, j)]) / sd).powi(2)).exp()
                };
                total += g / n as f64;
            }
            (id, total)
        })
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let golden = fs::read_to_string(golden_dir().join(name)).unwrap();
    for (line, (id, score)) in golden.lines().skip(1).zip(&scores) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1].parse::<u64>().unwrap(), *id);
        assert!((f[2].parse::<f64>().unwrap() - score).abs() < 1e-9);
    }
}

#[test]
fn prune_full_variance_keeps_all_nonzero_columns() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 9, 3);
    let out = ok(&s, &["prune", "--variance", "1.0"]);
    // the generator kills every eighth of the 48 channels
    assert!(out.starts_with("retained 42 of 48 features"), "{out}");
}

#[test]
fn self_query_prints_unit_score_first() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 12, 5);
    for id in ["1000", "1007", "1011"] {
        let csv = ok(&s, &["query", "--id", id, "--mf", "gaussian", "--format", "csv"]);
        assert_eq!(csv.lines().nth(1).unwrap(), format!("1,{id},1.000000000"));
    }
}

#[test]
fn json_output_equals_service_payload() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 15, 2);
    ok(&s, &["cluster", "assign", "x", "1000", "1003"]);
    ok(&s, &["cluster", "assign", "y", "1001", "1004"]);
    ok(&s, &["weights", "recompute"]);
    let session = Session::load(session_file(&s)).unwrap();
    let cases: [(&[&str], QueryRequest); 3] = [
        (
            &["query", "--id", "1002", "--tau", "0.7", "--top-k", "15", "--format", "json"],
            QueryRequest::gaussian(1002, 0.7, 15),
        ),
        (
            &["query", "--id", "1002", "--weights", "cluster", "--top-k", "4", "--format", "json"],
            QueryRequest::gaussian(1002, 1.0, 4).with_weights(WeightMode::ClusterDiff),
        ),
        (
            &["query-multi", "--ids", "1000,1003", "--tau", "0.1", "--weights", "svd", "--format", "json"],
            QueryRequest::trapezoidal(vec![1000, 1003], 0.1, 10).with_weights(WeightMode::Svd),
        ),
    ];
    for (args, req) in cases {
        let cli = ok(&s, args);
        assert_eq!(cli, session.query(&req).unwrap().to_json() + "\n");
    }
}

#[test]
fn csv_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 6, 1);
    let path = dir.path().join("out.csv");
    ok(&s, &["query", "--id", "1001", "--csv", path.to_str().unwrap()]);
    let csv = fs::read_to_string(path).unwrap();
    assert!(csv.starts_with("rank,object_id,score\n1,1001,1.000000000\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("session");
    assert_eq!(code(&s, &["ingest", dir.path().join("nothing").to_str().unwrap()]), 3);

    let s = pipeline(dir.path(), 6, 1);
    assert_eq!(code(&s, &["query", "--id", "42"]), 4);
    assert_eq!(code(&s, &["query-multi", "--ids", "1000"]), 6);
    assert_eq!(code(&s, &["query", "--id", "1000", "--tau", "0"]), 6);
    assert_eq!(code(&s, &["query", "--id", "1000", "--weights", "cluster"]), 5);
    assert_eq!(code(&s, &["prune", "--variance", "1.5"]), 6);
    assert_eq!(code(&s, &["weights", "recompute"]), 7);
    assert_eq!(code(&s, &["cluster", "remove", "ghost"]), 4);
    assert_eq!(code(&s, &["ingest", dir.path().join("bundle").to_str().unwrap()]), 5);
    assert_eq!(code(&s, &["query", "--id"]), 2);

    let file = session_file(&s);
    let mut bytes = fs::read(&file).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&file, bytes).unwrap();
    assert_eq!(code(&s, &["status"]), 3);

    let out = Command::new(env!("CARGO_BIN_EXE_latsim"))
        .arg("status")
        .env_remove("LATSIM_SESSION")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn session_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 6, 1);
    let out = Command::new(env!("CARGO_BIN_EXE_latsim"))
        .args(["--session", s.to_str().unwrap(), "status"])
        .env("LATSIM_SESSION", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let status: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(status["objects"], 6);
    assert_eq!(status["retained"], 41);
}

#[test]
fn cluster_commands_and_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline(dir.path(), 9, 4);
    ok(&s, &["cluster", "add", "empty"]);
    ok(&s, &["cluster", "assign", "p", "1000", "1003"]);
    ok(&s, &["cluster", "assign", "q", "1001"]);
    ok(&s, &["cluster", "remove", "empty"]);
    ok(&s, &["cluster", "rename", "q", "r"]);
    let list = ok(&s, &["cluster", "list"]);
    assert_eq!(list, "p\t2\t1000,1003\nr\t1\t1001\n");
    ok(&s, &["weights", "recompute"]);
    let status = ok(&s, &["status"]);
    assert!(status.contains("\"stale\": false"));
    ok(&s, &["cluster", "unassign", "r", "1001"]);
    assert_eq!(ok(&s, &["cluster", "list"]), "p\t2\t1000,1003\n");
    assert!(ok(&s, &["status"]).contains("\"stale\": true"));
    let err = latsim(&s, &["query", "--id", "1002", "--weights", "cluster"]);
    assert!(String::from_utf8_lossy(&err.stderr).contains("predate"));
}

#[test]
fn sparsity_demo_emits_history_csv() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path();
    let csv = ok(s, &["sparsity-demo", "--beta", "0.3", "--alpha", "0.5", "--lambda", "1", "--epochs", "5", "--images", "4", "--size", "8", "--hidden", "4"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L_task,L_sp,R_sp,R_sp0,gamma,R");
    assert_eq!(lines.count(), 5);
    let by_target = ok(s, &["sparsity-demo", "--target-sparsity", "0.7", "--epochs", "5", "--images", "4", "--size", "8", "--hidden", "4"]);
    assert_eq!(csv, by_target);
    assert_eq!(code(s, &["sparsity-demo", "--beta", "0.3", "--target-sparsity", "0.7"]), 2);
    assert_eq!(code(s, &["sparsity-demo", "--beta", "1.5", "--epochs", "1"]), 6);
}
