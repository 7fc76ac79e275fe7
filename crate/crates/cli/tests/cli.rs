use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_BEAM: &str = r#"
name = "small"
h = 0.01
frames = 2
seed = 3

[solver]
method = "jgs2_cubature"
tol_dx = 1e-4
max_outer = 500

[[bodies]]
box = { min = [0, 0, 0], max = [0.4, 0.1, 0.1], cells = [4, 1, 1] }
young = 1e5
poisson = 0.3
pins = [{ point = [0, 0, 0], normal = [1, 0, 0] }]
"#;

fn write_scene(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scene.toml");
    fs::write(&path, text).unwrap();
    path
}

fn perturb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perturb"))
        .args(args)
        .env("PERTURB_CACHE_DIR", dir.join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn run_writes_metrics_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), SMALL_BEAM);
    let out_dir = dir.path().join("out");
    let out = perturb(
        dir.path(),
        &[
            "run",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "frame,iter,solver,energy,dx_norm,grad_norm,wall_ms"
    );
    assert!(metrics
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("jgs2_cubature")));
    assert!(out_dir.join("frame_0001.obj").exists());
}

#[test]
fn precompute_is_cached_on_second_call() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), SMALL_BEAM);
    let first = perturb(
        dir.path(),
        &["precompute", "--scene", scene.to_str().unwrap()],
    );
    assert_eq!(code(&first), 0);
    assert!(String::from_utf8_lossy(&first.stdout).contains("not from cache"));
    let second = perturb(
        dir.path(),
        &["precompute", "--scene", scene.to_str().unwrap()],
    );
    assert!(String::from_utf8_lossy(&second.stdout).contains("loaded from cache"));
    let fresh = perturb(
        dir.path(),
        &[
            "precompute",
            "--scene",
            scene.to_str().unwrap(),
            "--no-cache",
        ],
    );
    assert!(String::from_utf8_lossy(&fresh.stdout).contains("not from cache"));
}

#[test]
fn compare_writes_error_curves() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), SMALL_BEAM);
    let out_dir = dir.path().join("cmp");
    let out = perturb(
        dir.path(),
        &[
            "compare",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--solver",
            "jgs2_exact,plain_local",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let iterations = fs::read_to_string(out_dir.join("iterations.csv")).unwrap();
    // header + 2 frames x 2 solvers
    assert_eq!(iterations.lines().count(), 5);
    assert!(out_dir.join("errors.csv").exists());
}

#[test]
fn check_passes_on_a_small_beam() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), SMALL_BEAM);
    let out = perturb(
        dir.path(),
        &[
            "check",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            dir.path().join("chk").to_str().unwrap(),
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn non_convergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_BEAM
        .replace("max_outer = 500", "max_outer = 1")
        .replace("tol_dx = 1e-4", "tol_dx = 1e-12");
    let scene = write_scene(dir.path(), &text);
    let out = perturb(
        dir.path(),
        &[
            "run",
            "--scene",
            scene.to_str().unwrap(),
            "--solver",
            "plain_local",
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_scene_key_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(
        dir.path(),
        &SMALL_BEAM.replace("poisson = 0.3", "poisson = 0.3\nshear = 2"),
    );
    let out = perturb(dir.path(), &["run", "--scene", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bodies[0].shear"));
}

#[test]
fn usage_errors_exit_with_1_and_help_with_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&perturb(dir.path(), &["run"])), 1);
    assert_eq!(
        code(&perturb(
            dir.path(),
            &["run", "--scene", "x.toml", "--solver", "cg"]
        )),
        1
    );
    assert_eq!(code(&perturb(dir.path(), &["--help"])), 0);
    assert_eq!(
        code(&perturb(
            dir.path(),
            &["run", "--scene", "/nonexistent/scene.toml"]
        )),
        1
    );
}
