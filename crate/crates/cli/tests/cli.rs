use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tissue-recon"))
        .args(args)
        .output()
        .expect("spawn")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn simulate(dir: &Path, frames: &str) {
    let out = cli(&["simulate", "--preset", "static", "--output", path(dir), "--frames", frames, "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_reconstruct_writes_outputs() {
    let root = tempfile::tempdir().unwrap();
    let (input, output) = (root.path().join("in"), root.path().join("out"));
    simulate(&input, "2");
    assert!(input.join("calibration.json").is_file());
    assert!(input.join("left_000001.ppm").is_file());

    let out = cli(&["reconstruct", "--input", path(&input), "--output", path(&output), "--profile", "efficient", "--eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ply", "nodes.ply", "trajectory.csv", "metrics.json", "timings.json"] {
        assert!(output.join(f).is_file(), "missing {f}");
    }
    let ply = std::fs::read_to_string(output.join("model.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(output.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["ssim_a"].as_f64().unwrap() > 0.5);
    let traj = std::fs::read_to_string(output.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 3);
}

#[test]
fn empty_input_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let out = cli(&["reconstruct", "--input", path(root.path()), "--output", path(&root.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("missing");
    let out = cli(&["reconstruct", "--input", path(&missing), "--output", path(root.path())]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = root.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    let out = cli(&["reconstruct", "--input", path(root.path()), "--output", path(root.path()), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(3));

    let out = cli(&["simulate", "--preset", "nonsense", "--output", path(root.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ingestion_errors_exit_4() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("in");
    simulate(&input, "3");
    for side in ["left", "right"] {
        std::fs::remove_file(input.join(format!("{side}_000001.ppm"))).unwrap();
    }
    let out = cli(&["reconstruct", "--input", path(&input), "--output", path(&root.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains('1'));
}

#[test]
fn bad_flag_value_is_rejected() {
    let out = cli(&["reconstruct", "--input", ".", "--output", ".", "--profile", "fastest"]);
    assert!(!out.status.success());
}

#[test]
fn bench_prints_stage_table() {
    let out = cli(&["bench", "--preset", "static", "--frames", "1", "--warmup", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["preset"], "static");
    for stage in ["depth", "mask", "registration", "deformation", "fusion"] {
        assert_eq!(report["stages"][stage]["count"], 1, "{stage}");
    }
}
