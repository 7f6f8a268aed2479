use std::path::Path;
use std::process::{Command, Output};

fn tidecal(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tidecal"))
        .args(args)
        .env("TIDECAL_PROJECT", project)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(project: &Path, args: &[&str]) {
    let out = tidecal(project, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tidecal(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&tidecal(dir.path(), &["design", "--bogus"])), 1);
    ok(dir.path(), &["init"]);
    let out = tidecal(dir.path(), &["design", "--n", "0"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
    assert_eq!(
        code(&tidecal(dir.path(), &["calibrate", "--goal", "median"])),
        1
    );
    assert_eq!(code(&tidecal(dir.path(), &["--workers", "0", "design"])), 1);
    assert_eq!(code(&tidecal(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_stages_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = tidecal(dir.path(), &["design"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("init"));
    ok(dir.path(), &["init"]);
    let out = tidecal(dir.path(), &["fit"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluate"));
}

#[test]
fn project_flag_overrides_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let target = flag_dir.path().to_str().unwrap();
    ok(
        env_dir.path(),
        &["init", "--project", target, "--seed", "11"],
    );
    assert!(flag_dir.path().join("project.json").exists());
    assert!(!env_dir.path().join("project.json").exists());
}

#[test]
fn damaged_models_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for args in [
        &["init"][..],
        &["synth-obs"],
        &["design", "--n", "25"],
        &["evaluate"],
        &["fit"],
    ] {
        ok(p, args);
    }
    let model = p.join("models/model_3.json");
    let text = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&model, &text[..text.len() / 3]).unwrap();
    assert_eq!(code(&tidecal(p, &["validate"])), 2);
    std::fs::remove_file(&model).unwrap();
    assert_eq!(code(&tidecal(p, &["validate"])), 3);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for args in [
        &["init"][..],
        &["synth-obs"],
        &["design"],
        &["evaluate", "--workers", "1"],
        &["fit"],
        &["validate"],
        &["calibrate", "--goal", "mean", "--algo", "both"],
        &["check-optimum"],
        &["report"],
    ] {
        ok(p, args);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    let check = &report["optimum_checks"][0];
    assert_eq!(check["goal"]["kind"], "mean_rmse");
    assert!(check["rel_gap"].as_f64().unwrap().is_finite());
    assert!(report["validation"]["mean_r2"].as_f64().unwrap() > 0.99);
    assert!(report.get("sobol").is_none());
    let history = std::fs::read_to_string(p.join("calibration/mean_pso_history.csv")).unwrap();
    assert!(history.starts_with("iter,best_f\n1,"));
}
