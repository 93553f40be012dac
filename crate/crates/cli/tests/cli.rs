use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::Value as Json;
use univharm::builder::BuildResult;
use univharm::{CRat, HarmonicTruncation, TreeConfig};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn univharm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_univharm"))
        .args(args)
        .env_remove("UNIVHARM_DEPTH_CAP")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Json {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

#[test]
fn tree_validate_exit_codes() {
    assert_eq!(code(&univharm(&["tree-validate", "--config", &fixture("binary.json")])), 0);
    assert_eq!(code(&univharm(&["tree-validate", "--config", &fixture("thirds.json")])), 0);
    assert_eq!(code(&univharm(&["tree-validate", "--config", "binary"])), 0);

    let bad = univharm(&["tree-validate", "--config", &fixture("weights_099.json")]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("vertex []"), "{}", stderr(&bad));
    assert!(stderr(&bad).contains("99/100"));

    assert_eq!(code(&univharm(&["tree-validate", "--config", &fixture("malformed.json")])), 1);
    assert_eq!(code(&univharm(&["tree-validate", "--config", "/nonexistent/tree.json"])), 1);
}

#[test]
fn depth_cap_override_from_env() {
    let out = Command::new(env!("CARGO_BIN_EXE_univharm"))
        .args(["tree-validate", "--config", &fixture("binary.json"), "--depth", "20"])
        .env("UNIVHARM_DEPTH_CAP", "5")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("through level 5"), "{}", stdout(&out));
}

#[test]
fn build_example_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "example");
    let out = univharm(&[
        "build",
        "--config",
        &fixture("binary.json"),
        "--targets",
        &fixture("target_10.json"),
        "--schedule",
        &fixture("example_schedule.json"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = fs::read_to_string(dir.join("trace.tsv")).unwrap();
    let p: Vec<&str> = trace.lines().skip(1).take(3).map(|l| l.split('\t').nth(3).unwrap()).collect();
    assert_eq!(p, ["1/4", "1/6", "1/10"]);
    for name in ["result.json", "verify.json", "density.tsv", "manifest.json"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    assert_eq!(read_json(&dir.join("verify.json"))["root_ok"], Json::Bool(true));
}

#[test]
fn build_float_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "float");
    let out = univharm(&[
        "build",
        "--targets",
        &fixture("target_10.json"),
        "--schedule",
        &fixture("example_schedule.json"),
        "--mode",
        "float",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&dir.join("result.json"))["mode"], "float");
}

#[test]
fn stride_below_transition_length_is_infeasible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = univharm(&[
        "build",
        "--schedule",
        "fm",
        "--stride",
        "2",
        "--horizon",
        "64",
        "--targets",
        &fixture("target_10.json"),
        "--out",
        out_dir(&tmp, "fm").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("transition length 4"), "{}", stderr(&out));
}

#[test]
fn empty_schedule_gives_a_constant_function() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "empty");
    let out = univharm(&[
        "build",
        "--schedule",
        "empty",
        "--horizon",
        "6",
        "--targets",
        &fixture("target_10.json"),
        "--initial",
        "3/7:-1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&dir.join("result.json"));
    let values = doc["f"]["values"].as_array().unwrap();
    assert_eq!(values.len(), 127);
    assert!(values.iter().all(|v| v == &values[0]));
    assert_eq!(values[0], serde_json::json!([["3/7", "-1/1"]]));
}

#[test]
fn build_result_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "x");
    let out = univharm(&["build", "--horizon", "30", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&dir.join("result.json"));
    let tree = Arc::new(TreeConfig::binary(30));
    let parsed = BuildResult::<CRat>::from_json(tree, &doc).unwrap();
    assert_eq!(parsed.to_json(), doc);
}

#[test]
fn metric_exact_and_float() {
    let a = fixture("sf_a.json");
    let b = fixture("sf_b.json");
    let exact = univharm(&["metric", "--config", "binary", "--a", &a, "--b", &b]);
    assert_eq!(code(&exact), 0);
    let doc: Json = serde_json::from_str(&stdout(&exact)).unwrap();
    assert_eq!(doc["P_exact"], "1/12");
    let float = univharm(&["metric", "--config", "binary", "--a", &a, "--b", &b, "--mode", "float"]);
    let doc: Json = serde_json::from_str(&stdout(&float)).unwrap();
    assert!((doc["P"].as_f64().unwrap() - 1.0 / 12.0).abs() < 1e-15);
}

#[test]
fn density_of_an_index_set() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("set.json");
    fs::write(&path, r#"{"horizon": 4, "indices": [2, 4]}"#).unwrap();
    let out = univharm(&["density", "--input", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let last = text.lines().filter(|l| !l.starts_with('#')).next_back().unwrap();
    assert_eq!(last.split('\t').take(2).collect::<Vec<_>>(), ["4", "2"]);
}

#[test]
fn span_writes_certificates_and_combos() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(&tmp, "span");
    let out = univharm(&[
        "span",
        "--horizon",
        "120",
        "--coeffs",
        "1,2;0,1:1",
        "--write-combos",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let certs = read_json(&dir.join("certificates.json"));
    assert_eq!(certs.as_array().unwrap().len(), 2);
    let combo = read_json(&dir.join("combo_1.json"));
    let tree = Arc::new(TreeConfig::binary(120));
    let parsed = HarmonicTruncation::<CRat>::from_json(tree, &combo).unwrap();
    assert_eq!(parsed.to_json(), combo);
    assert!(dir.join("offsets.json").exists());
}

#[test]
fn rerun_reproduces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let first = out_dir(&tmp, "first");
    let out = univharm(&["span", "--horizon", "60", "--combos", "3", "--seed", "7", "--out", first.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let second = out_dir(&tmp, "second");
    let manifest = first.join("manifest.json");
    let re = univharm(&["rerun", "--manifest", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&re), 0, "{}", stdout(&re));
    assert!(!stdout(&re).contains("differs"));
    let a = read_json(&manifest);
    let b = read_json(&second.join("manifest.json"));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["seed"], 7);
}

#[test]
fn demo_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let short = univharm(&["demo", "--horizon", "10", "--out", out_dir(&tmp, "short").to_str().unwrap()]);
    assert_eq!(code(&short), 3, "{}", stderr(&short));

    let dir = out_dir(&tmp, "k1");
    let single = univharm(&["demo", "--horizon", "128", "--targets", "1", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&single), 0, "{}", stdout(&single));
    let report = read_json(&dir.join("demo.json"));
    assert_eq!(report["fm"]["targets"].as_array().unwrap().len(), 1);
    assert!(fs::read_to_string(dir.join("demo.txt")).unwrap().contains("passed=true"));
}
