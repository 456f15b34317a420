use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn twl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twl"))
        .args(args)
        .env_remove("TWL_SEED")
        .env_remove("TWL_C0")
        .env_remove("TWL_FORMAT")
        .env_remove("TWL_OUTPUT")
        .output()
        .expect("twl runs")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = twl(&["gen", "uniform-random", "--size", "20", "--seed", "11", "-o", s(p)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = twl(&["gen", "uniform-random", "--size", "20", "--seed", "12"]);
    assert_ne!(fs::read(&a).unwrap(), c.stdout);
}

#[test]
fn gen_corpus_writes_every_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = twl(&["gen", "--corpus", s(dir.path())]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), twl_core::corpus::standard().len());
}

#[test]
fn constants_match_frozen_csv() {
    let o = twl(&["--format", "csv", "constants", s(&golden(""))]);
    assert!(o.status.success());
    let expected = fs::read_to_string(golden("constants.csv.expected")).unwrap();
    assert_eq!(stdout(&o), expected);
}

#[test]
fn single_atom_norm_is_inverse_distance() {
    let o = twl(&["--format", "csv", "constants", s(&golden("single-atom.json"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    let norm: f64 = row[4].parse().unwrap();
    let exact = 4096.0 / 1365.0;
    assert!((norm - exact).abs() <= 1e-12 * exact, "{norm} vs {exact}");
}

#[test]
fn verify_golden_passes() {
    let o = twl(&["verify", s(&golden(""))]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(0), "{err}");
    assert!(!err.contains("FAIL"));
    assert_eq!(err.lines().filter(|l| l.starts_with("PASS")).count(), twl_core::checks::IDS.len());
}

#[test]
fn malformed_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"spec_version\": \"1.0\", \"name\": 3}").unwrap();
    assert_eq!(twl(&["constants", s(&bad)]).status.code(), Some(3));

    let text = fs::read_to_string(golden("single-atom.json")).unwrap();
    fs::write(&bad, text.replace("\"1.0\"", "\"0.9\"")).unwrap();
    assert_eq!(twl(&["constants", s(&bad)]).status.code(), Some(3));

    fs::write(&bad, text.replace("2730", "1365")).unwrap();
    assert_eq!(twl(&["constants", s(&bad)]).status.code(), Some(3));

    assert_eq!(twl(&["constants", s(&dir.path().join("missing.json"))]).status.code(), Some(3));
    assert_eq!(twl(&["no-such-command"]).status.code(), Some(3));
    assert_eq!(twl(&["--help"]).status.code(), Some(0));
}

#[test]
fn decompose_empty_q0_is_single_leaf() {
    let dir = tempfile::tempdir().unwrap();
    let dot = dir.path().join("t.dot");
    let o = twl(&["decompose", s(&golden("single-atom.json")), "--dot", s(&dot)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["spec_version"], "1.0");
    assert_eq!(v["body"]["node_count"], 1);
    assert_eq!(v["body"]["root"]["leaf"], true);
    let dot = fs::read_to_string(dot).unwrap();
    assert!(dot.starts_with("digraph decomposition {"));
    assert!(!dot.contains("->"));
}

#[test]
fn report_csv_has_one_row_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let jsons = dir.path().join("json");
    let o = twl(&["--format", "csv", "report", s(&golden("")), "--out-dir", s(&jsons), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let header = r.headers().unwrap().clone();
    for col in ["a2", "testing", "norm", "ratio", "tau0", "depth", "c_max"] {
        assert!(header.iter().any(|h| h == col), "missing {col}");
    }
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(fs::read_dir(&jsons).unwrap().count(), 5);

    let again = dir.path().join("again.csv");
    assert!(twl(&["--format", "csv", "report", s(&golden("")), "-o", s(&again)]).status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn forms_csv_lists_w_atoms() {
    let o = twl(&["--format", "csv", "forms", s(&golden("lattice-4.json"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("atom_position,value"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn env_overrides_flags_defaults() {
    let a = Command::new(env!("CARGO_BIN_EXE_twl"))
        .args(["gen", "uniform-random", "--size", "8"])
        .env("TWL_SEED", "5")
        .output()
        .unwrap();
    let b = twl(&["gen", "uniform-random", "--size", "8", "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
}
