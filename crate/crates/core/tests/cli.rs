//! End-to-end runs of the `sdpf` binary: exit codes, reports and certify.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sdpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdpf")).args(args).env_remove("SDPF_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn theta_graph_solves_to_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let graph = path(dir.path(), "c5.graph");
    std::fs::write(&graph, "5 5\n1 2\n2 3\n3 4\n4 5\n1 5\n").unwrap();
    let report = path(dir.path(), "c5.json");
    let out = sdpf(&["solve", s(&graph), "--family", "theta", "-o", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&report);
    assert!((v["objective"].as_f64().unwrap() + 5f64.sqrt()).abs() < 1e-5);
}

#[test]
fn malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = path(dir.path(), "bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&sdpf(&["solve", s(&bad)])), 2);
    assert_eq!(code(&sdpf(&["solve", s(&path(dir.path(), "missing.json"))])), 2);
    assert_eq!(code(&sdpf(&["solve"])), 2);
}

#[test]
fn iteration_cap_exits_three_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let prob = path(dir.path(), "prob.json");
    let report = path(dir.path(), "report.json");
    assert_eq!(code(&sdpf(&["generate", "--family", "random", "--n", "20", "--m", "25", "--seed", "3", "-o", s(&prob)])), 0);
    assert_eq!(code(&sdpf(&["solve", s(&prob), "--max-iter", "1", "-o", s(&report)])), 3);
    assert_eq!(read_json(&report)["status"], "max_iter");
}

#[test]
fn generate_is_deterministic_and_guards_input() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    for p in [&a, &b] {
        assert_eq!(code(&sdpf(&["generate", "--family", "snl", "--p", "50", "--seed", "1", "-o", s(p)])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let q = path(dir.path(), "q.json");
    assert_eq!(code(&sdpf(&["generate", "--family", "boxqp", "--n", "100", "--density", "0.25", "-o", s(&q)])), 0);
    assert_eq!(read_json(&q)["n"], 101);

    assert_eq!(code(&sdpf(&["generate", "--family", "random", "--m", "0", "-o", s(&q)])), 2);
    assert_eq!(code(&sdpf(&["generate", "--family", "nope", "-o", s(&q)])), 2);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    assert_eq!(code(&sdpf(&["generate", "--family", "random", "--seed", "9", "-o", s(&a)])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_sdpf"))
        .args(["generate", "--family", "random", "-o", s(&b)])
        .env("SDPF_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn report_schema_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let prob = path(dir.path(), "prob.json");
    let report = path(dir.path(), "report.json");
    assert_eq!(code(&sdpf(&["generate", "--family", "random", "--n", "10", "--m", "15", "-o", s(&prob)])), 0);
    assert_eq!(code(&sdpf(&["solve", s(&prob), "-o", s(&report)])), 0);
    let v = read_json(&report);
    assert_eq!(
        keys(&v),
        ["certificate", "counters", "format", "objective", "options", "problem_hash", "residues", "seed", "solution", "solve", "status", "version"]
    );
    assert_eq!(v["format"], "sdpf-report");
    assert_eq!(v["version"], 1);
    assert_eq!(keys(&v["residues"]), ["rc", "rd", "rd_method", "rp"]);
    assert_eq!(keys(&v["counters"]), ["t_alg", "t_cg", "t_ch", "t_lin"]);
    assert_eq!(keys(&v["solution"]), ["r", "support", "y"]);
    assert_eq!(keys(&v["certificate"]), ["big_lambda", "lambda"]);
    for field in ["objective_history", "rank_history", "support_history", "escapes", "reductions", "perturbation"] {
        assert!(v["solve"].get(field).is_some(), "solve.{field} missing");
    }
}

#[test]
fn certify_round_trip_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let prob = path(dir.path(), "prob.json");
    let report = path(dir.path(), "report.json");
    assert_eq!(code(&sdpf(&["generate", "--family", "theta", "--n", "12", "--seed", "2", "-o", s(&prob)])), 0);
    assert_eq!(code(&sdpf(&["solve", s(&prob), "-o", s(&report)])), 0);

    let out = sdpf(&["certify", s(&prob), s(&report)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("matches report"));

    let mut v = read_json(&report);
    let first = &mut v["solution"]["r"]["data"][0];
    *first = Value::from(first.as_f64().unwrap() + 0.1);
    let tampered = path(dir.path(), "tampered.json");
    std::fs::write(&tampered, serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(code(&sdpf(&["certify", s(&prob), s(&tampered)])), 3);

    let other = path(dir.path(), "other.json");
    assert_eq!(code(&sdpf(&["generate", "--family", "theta", "--n", "12", "--seed", "5", "-o", s(&other)])), 0);
    assert_eq!(code(&sdpf(&["certify", s(&other), s(&report)])), 2);
}

/// Triangle with every vertex twinned: the optimal face is degenerate.
const TWIN_TRIANGLE: &str = "6 12\n1 2\n4 2\n1 5\n4 5\n1 3\n4 3\n1 6\n4 6\n2 3\n5 3\n2 6\n5 6\n";

#[test]
fn certify_refine_on_degenerate_theta() {
    let dir = tempfile::tempdir().unwrap();
    let graph = path(dir.path(), "twins.graph");
    std::fs::write(&graph, TWIN_TRIANGLE).unwrap();
    let report = path(dir.path(), "twins.json");
    assert_eq!(code(&sdpf(&["solve", s(&graph), "--family", "theta", "--t-cg", "5", "-o", s(&report)])), 0);
    let out = sdpf(&["certify", s(&graph), s(&report), "--family", "theta", "--refine"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.starts_with("refine")).unwrap();
    let nums: Vec<f64> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    assert!(nums[1] <= nums[0], "{line}");
}
