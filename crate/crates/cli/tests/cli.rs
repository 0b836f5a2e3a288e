//! Drives the built binary end to end and checks outputs and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use projforge::attack::PatchParams;
use projforge::fixtures::{affine_lattice, identity_square};
use projforge::tps::TpsModel;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn projforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identity_and_affine_controls_fit_without_bending() {
    let dir = tempfile::tempdir().unwrap();
    for (name, cps) in [("identity", identity_square()), ("affine", affine_lattice())] {
        let controls = dir.path().join(format!("{name}.txt"));
        fs::write(&controls, cps.to_text()).unwrap();
        let out = dir.path().join(format!("{name}_model.txt"));
        let o = projforge(&["fit-tps", s(&controls), "--out", s(&out), "--verify"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(TpsModel::load(&out).unwrap().max_abs_weight() <= 1e-8);
        assert!(dir.path().join(format!("{name}_model.txt.config.json")).is_file());
    }
}

#[test]
fn malformed_control_line_is_an_input_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let controls = dir.path().join("bad.txt");
    fs::write(&controls, "0 0 0 0\n1 0 1 0\n0 1 zero 1\n").unwrap();
    let o = projforge(&["fit-tps", s(&controls), "--out", s(&dir.path().join("m.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.txt:3"), "{}", stderr(&o));
}

#[test]
fn checkerboard_controls_verify() {
    let dir = tempfile::tempdir().unwrap();
    let controls = fixtures().join("tps/checkerboard.txt");
    let o = projforge(&["fit-tps", s(&controls), "--out", s(&dir.path().join("m.txt")), "--verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verify: worst control residual"));
}

#[test]
fn single_sample_color_fit_is_near_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one.txt");
    fs::write(&data, "0.4 0.5 0.6 0.2 0.8 0.3 0.35 0.62 0.41\n").unwrap();
    let o = projforge(&["fit-color", s(&data), "--out", s(&dir.path().join("c.txt"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let l1: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("train L1 "))
        .and_then(|v| v.trim().parse().ok())
        .expect("train L1 reported");
    assert!(l1 <= 1e-3, "train L1 {l1}");
}

#[test]
fn empty_color_dataset_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.txt");
    fs::write(&data, "# nothing here\n").unwrap();
    let o = projforge(&["fit-color", s(&data), "--out", s(&dir.path().join("c.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty dataset"), "{}", stderr(&o));
}

#[test]
fn zero_iterations_leave_the_patch_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"attack": {"iterations": 0}}"#).unwrap();
    let out = dir.path().join("run");
    let bundle = fixtures().join("bundles/view_p0");
    let det = fixtures().join("detector.txt");
    let o = projforge(&["train-patch", s(&bundle), "--detector", s(&det), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let patch = PatchParams::load(out.join("patch_final.txt")).unwrap();
    assert!(patch.delta().data().iter().all(|&v| v == 0.5));
    assert!(out.join("config.json").is_file());
}

#[test]
fn rerun_from_saved_config_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"attack": {"iterations": 4, "checkpoint_every": 2, "eot": {"samples_per_step": 2}}}"#).unwrap();
    let bundle = fixtures().join("bundles/view_p0");
    let det = fixtures().join("detector.txt");
    let first = dir.path().join("a");
    let o = projforge(&["train-patch", s(&bundle), "--detector", s(&det), "--out", s(&first), "--config", s(&cfg), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let second = dir.path().join("b");
    let o = Command::new(env!("CARGO_BIN_EXE_projforge"))
        .args(["train-patch", s(&bundle), "--detector", s(&det), "--out", s(&second), "--config", s(&first.join("config.json"))])
        .env("PROJFORGE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["trace.csv", "patch_final.txt", "patch_iter_0002.txt", "config.json"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn bundle_without_controls_is_an_input_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("view");
    fs::create_dir(&bundle).unwrap();
    for entry in fs::read_dir(fixtures().join("bundles/view_p0")).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() && p.file_name().unwrap() != "controls.txt" {
            fs::copy(&p, bundle.join(p.file_name().unwrap())).unwrap();
        }
    }
    let o = projforge(&["train-patch", s(&bundle), "--detector", s(&fixtures().join("detector.txt")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("controls.txt"), "{}", stderr(&o));
}

fn evaluate(dir: &Path, config: &str) -> Output {
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, config).unwrap();
    let patch = dir.join("patch.txt");
    PatchParams::mid_gray(10, 30, 30).unwrap().save(&patch).unwrap();
    projforge(&[
        "evaluate",
        s(&fixtures().join("bundles")),
        "--patch",
        s(&patch),
        "--detector",
        s(&fixtures().join("detector.txt")),
        "--ambient-dir",
        s(&fixtures().join("ambient")),
        "--out",
        s(&dir.join("report")),
        "--config",
        s(&cfg),
    ])
}

#[test]
fn one_cell_grid_gives_one_report_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = evaluate(
        dir.path(),
        r#"{"sweep": {"distances": [["1.5m", 1.0]], "angles": ["+0"], "ambients": ["mid"], "frames_per_cell": 2}}"#,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("report/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("1.5m,+0,mid,"));
    assert!(dir.path().join("report/heatmap_mid.svg").is_file());
}

#[test]
fn unknown_ambient_label_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = evaluate(dir.path(), r#"{"sweep": {"ambients": ["dusk"], "frames_per_cell": 1}}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dusk"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = evaluate(dir.path(), r#"{"sweep": {"frames": 1}}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frames"), "{}", stderr(&o));
}

#[test]
fn diag_tps_passes_on_the_fixture() {
    let o = projforge(&["diag", "tps"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn diag_determinism_passes_and_repeats() {
    let a = projforge(&["diag", "determinism"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = projforge(&["diag", "determinism"]);
    assert_eq!(stdout(&a), stdout(&b));
}
