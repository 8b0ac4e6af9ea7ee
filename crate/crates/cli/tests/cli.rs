use std::path::Path;
use std::process::{Command, Output};

const LQ1: &str = r#"family = "lq"
n = 1
d = 1
l = 1
a = [[-1.0]]
b = [[1.0]]
sigma = [[1.0]]
q = [[1.0]]
r = [[1.0]]

[control_set]
kind = "box"
lower = [-5.0]
upper = [5.0]

[run]
seed = 7
paths = 512
horizon = 6.0
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("model.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergosmp"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn verify_trivial_suite_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), LQ1);
    let o = run(dir.path(), &["verify", "--model", "model.toml", "--suite", "trivial", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = std::fs::read_to_string(dir.path().join("v/verify.json")).unwrap();
    assert!(report.contains("\"schema_version\": 1"));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn malformed_config_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &LQ1.replace("sigma =", "sigmma ="));
    let o = run(dir.path(), &["cost", "--model", "model.toml"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sigmma") && err.contains("line 7"), "{err}");
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &LQ1.replace("seed = 7", ""));
    let o = run(dir.path(), &["cost", "--model", "model.toml"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    let o = run(dir.path(), &["cost", "--model", "model.toml", "--seed", "3"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn duality_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &LQ1.replace("[run]", "[run]\nx0 = [1.0]"));
    let o = run(dir.path(), &["duality-check", "--model", "model.toml", "--eta", "one", "--T", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("duality.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rel = v["report"]["rel_residual"].as_f64().unwrap();
    let lhs = v["report"]["lhs"].as_f64().unwrap();
    assert!(rel < 0.05 && (lhs - 1.0).abs() < 0.05, "{text}");
}

#[test]
fn smp_check_flags_zero_control() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), LQ1);
    let o = run(dir.path(), &["smp-check", "--model", "model.toml", "--paths", "1024", "--T", "10"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Violated"));
}

#[test]
fn outputs_are_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), LQ1);
    for (out, workers) in [("a", "1"), ("b", "2")] {
        let o = run(
            dir.path(),
            &["simulate", "--model", "model.toml", "--out", out, "--workers", workers],
        );
        assert_eq!(code(&o), 0);
        let o = run(dir.path(), &["adjoint", "--model", "model.toml", "--out", out, "--workers", workers]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["paths.csv", "ensemble.bin", "simulate.json", "adjoint.csv", "adjoint.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn optimize_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), LQ1);
    let o = run(dir.path(), &["optimize", "--model", "model.toml", "--iters", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,param_1,param_2,tail_min"));
    assert!(trace.lines().count() >= 2);
}

#[test]
fn sufficiency_certifies_riccati_feedback() {
    let dir = tempfile::tempdir().unwrap();
    let text = LQ1.replace("[run]", "[run]\nprobes = 20\ncontrol = { kind = \"affine\", gain = [[0.41421356237309503]] }");
    write_config(dir.path(), &text);
    let o = run(dir.path(), &["sufficiency", "--model", "model.toml", "--paths", "1024", "--T", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn unknown_suite_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), LQ1);
    let o = run(dir.path(), &["verify", "--model", "model.toml", "--suite", "most"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn shipped_configs_pass_trivial_suite() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["lq1", "cubic1"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.toml"));
        let o = run(
            dir.path(),
            &["verify", "--model", path.to_str().unwrap(), "--suite", "trivial", "--out", name],
        );
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
