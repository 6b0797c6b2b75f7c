use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nas3r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nas3r")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, scene: &str) {
    let out = nas3r(&["synth", "--scene", scene, "--out", dir.to_str().unwrap(), "--no-timestamp"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_reports_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "plane-arc");
    synth(&b, "plane-arc");
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["seed"], 21);
    assert!(manifest["files"]["frames/000004.png"].is_string());
    assert!(a.join("depth/000000.pfm").exists());

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = nas3r(&["synth", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    assert_eq!(code(&nas3r(&["synth", "--scene", "nope", "--out", "x"])), 2);
    assert_eq!(code(&nas3r(&["synth", "--out", "x", "--set", "scene.colour=1"])), 2);
    assert_eq!(code(&nas3r(&["synth"])), 2);

    let list = nas3r(&["synth", "--list"]);
    assert_eq!(code(&list), 0);
    assert!(String::from_utf8_lossy(&list.stdout).contains("room-orbit"));
}

#[test]
fn synth_generation_failure_is_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = nas3r(&["synth", "--out", dir.path().join("s").to_str().unwrap(), "--set", "scene.frames=1"]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn render_matches_stored_frames() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s");
    synth(&scene, "room-arc");
    let png = dir.path().join("view.png");
    let out = nas3r(&["render", "--scene", scene.to_str().unwrap(), "--camera", "3", "--out", png.to_str().unwrap(), "--depth"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("exact"));
    assert!(png.exists() && png.with_extension("pfm").exists());

    let out = nas3r(&["render", "--scene", scene.to_str().unwrap(), "--camera", "99", "--out", png.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = nas3r(&["render", "--scene", scene.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let pose = dir.path().join("pose.json");
    std::fs::write(&pose, r#"{"rotation": [1,0,0,0,1,0,0,0,1], "translation": [0,0,0]}"#).unwrap();
    let out = nas3r(&["render", "--scene", scene.to_str().unwrap(), "--pose", pose.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
}

#[test]
fn ba_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s");
    synth(&scene, "cloud-arc");
    let s = scene.to_str().unwrap();

    // Ground-truth init is optimal up to the 8-bit quantization of the frames.
    let out_dir = dir.path().join("optimal");
    let out = nas3r(&["ba", "--scene", s, "--out", out_dir.to_str().unwrap(), "--set", "init=ground-truth", "--set", "ba.loss_tol=1e-5", "--no-timestamp"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&out_dir.join("eval.json"));
    assert_eq!(report["steps"], 0);
    assert_eq!(report["converged"], true);
    assert_eq!(report["seed"], 0);
    for f in ["history.csv", "params.json", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let out_dir = dir.path().join("diverge");
    let out = nas3r(&["ba", "--scene", s, "--out", out_dir.to_str().unwrap(), "--set", "ba.lr=1e6", "--set", "ba.max_steps=20"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));

    let out_dir = dir.path().join("frozen");
    let out = nas3r(&[
        "ba", "--scene", s, "--out", out_dir.to_str().unwrap(), "--freeze", "fov", "--set", "ba.max_steps=5",
        "--set", "snapshot_every=2", "--seed", "9",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&out_dir.join("eval.json"));
    assert_eq!(report["fov_rad"].as_f64().unwrap().to_bits(), report["fov_init_rad"].as_f64().unwrap().to_bits());
    assert_eq!(report["seed"], 9);
    assert!(out_dir.join("snapshots/step000004_view1_depth.png").exists());
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);

    assert_eq!(code(&nas3r(&["ba", "--scene", s, "--out", "x", "--set", "ba.lrr=1"])), 2);
    assert_eq!(code(&nas3r(&["ba", "--scene", "/nonexistent", "--out", "x"])), 2);
    assert_eq!(code(&nas3r(&["ba", "--scene", s, "--out", "x", "--set", "targets=[7]"])), 2);
}

#[test]
fn ba_config_files_need_a_version() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s");
    synth(&scene, "cloud-line");
    let cfg = dir.path().join("ba.json");
    std::fs::write(&cfg, r#"{"ba": {"max_steps": 2}}"#).unwrap();
    let run = |out: &str| nas3r(&["ba", "--scene", scene.to_str().unwrap(), "--out", out, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&run(dir.path().join("a").to_str().unwrap())), 2);
    std::fs::write(&cfg, r#"{"version": 1, "ba": {"max_steps": 2}}"#).unwrap();
    let out = run(dir.path().join("b").to_str().unwrap());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reports_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "cloud-orbit");
    let report_path = dir.path().join("report.json");
    let csv = dir.path().join("errors.csv");
    let out = nas3r(&[
        "eval", "--pred", a.to_str().unwrap(), "--gt", a.to_str().unwrap(), "--out", report_path.to_str().unwrap(),
        "--errors-csv", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&report_path);
    for t in ["5", "10", "20"] {
        assert_eq!(report["auc"][t], 1.0);
    }
    assert_eq!(report["rel"], 0.0);
    assert_eq!(report["tau"], 1.0);
    assert_eq!(report["psnr"], "exact");
    assert!(report["lpips"].is_null());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/eval_report.schema.json"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(validator.is_valid(&report));
    let mut broken = report.clone();
    broken.as_object_mut().unwrap().remove("auc");
    assert!(!validator.is_valid(&broken));

    let out = nas3r(&["synth", "--scene", "cloud-orbit", "--out", b.to_str().unwrap(), "--set", "scene.frames=4", "--no-timestamp"]);
    assert_eq!(code(&out), 0);
    assert_eq!(code(&nas3r(&["eval", "--pred", b.to_str().unwrap(), "--gt", a.to_str().unwrap()])), 2);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let small = ["gradcheck", "--scenes", "1", "--size", "16", "--primitives", "30"];
    let out = nas3r(&small);
    assert_eq!(code(&out), 0, "{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("target_pose") && table.contains("fov"));

    let out = nas3r(&[&small[..], &["--classes", "pose,fov"]].concat());
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(code(&out), 0);
    assert!(table.contains("fov") && !table.contains("opacity"));

    let out = nas3r(&[&small[..], &["--classes", "depth,fov", "--corrupt", "depth"]].concat());
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("depth") && !err.contains("fov"), "{err}");
}

#[test]
fn curriculum_table() {
    let out = nas3r(&["curriculum", "--start", "2", "--end", "20", "--ramp", "1000", "--every", "500"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "step\tinterval\n0\t2\n500\t11\n1000\t20\n");
    assert_eq!(code(&nas3r(&["curriculum", "--start", "5", "--end", "2"])), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_nas3r"))
        .args(["curriculum"])
        .env("NAS3R_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
